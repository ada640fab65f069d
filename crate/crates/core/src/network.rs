//! Model specification, parameters and the forward pass.
//!
//! Three denoising-autoencoder decoders are supported on top of a shared
//! rectifier encoder, plus a purely affine `Linear` baseline:
//!
//! * `NoLat` — plain top-down decoder, rectifier in the middle layers,
//!   affine at the bottom.
//! * `Add` — a gated elementwise lateral term is added to the top-down
//!   rectifier term in every middle layer.
//! * `Mod` — the top-down signal is moved inside the lateral gate, so the
//!   layer above modulates the strength of the lateral connection.
//!
//! Decoder weights are tied to the encoder, `W_g^(l) = W_f^(l+1)^T`. Tied
//! matrices are never materialized: the decoder reads the encoder tensor
//! directly, so the tying invariant holds by construction while the
//! parameter budget still counts both copies.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::real::Real;

/// Architecture variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Single affine map, the linear-denoiser baseline.
    Linear,
    /// Denoising autoencoder without lateral connections.
    NoLat,
    /// Additive lateral connections.
    Add,
    /// Modulated lateral connections.
    Mod,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "linear" => Some(Variant::Linear),
            "nolat" | "no-lat" => Some(Variant::NoLat),
            "add" => Some(Variant::Add),
            "mod" => Some(Variant::Mod),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Linear => "linear",
            Variant::NoLat => "nolat",
            Variant::Add => "add",
            Variant::Mod => "mod",
        }
    }

    fn has_lateral(self) -> bool {
        matches!(self, Variant::Add | Variant::Mod)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpecError {
    /// Layer sizes empty, zero-sized, or inconsistent with the variant.
    BadSizes(String),
    /// No layer size fits the requested parameter budget.
    NoFeasibleSize { budget: usize },
}

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecError::BadSizes(msg) => write!(f, "invalid model spec: {msg}"),
            SpecError::NoFeasibleSize { budget } => {
                write!(f, "no layer size fits a budget of {budget} parameters")
            }
        }
    }
}

impl core::error::Error for SpecError {}

/// Architecture variant plus layer sizes `[d, n_1, ..., n_L]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    variant: Variant,
    layer_sizes: Vec<usize>,
    tied: bool,
}

impl ModelSpec {
    pub fn new(variant: Variant, layer_sizes: Vec<usize>) -> Result<ModelSpec, SpecError> {
        if layer_sizes.is_empty() {
            return Err(SpecError::BadSizes("layer_sizes is empty".into()));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(SpecError::BadSizes("all layer sizes must be >= 1".into()));
        }
        let hidden = layer_sizes.len() - 1;
        match variant {
            Variant::Linear if hidden != 0 => {
                return Err(SpecError::BadSizes(format!(
                    "linear model takes [d] only, got {} hidden layers",
                    hidden
                )));
            }
            Variant::NoLat | Variant::Add | Variant::Mod if hidden == 0 => {
                return Err(SpecError::BadSizes(
                    "autoencoder variants need at least one hidden layer".into(),
                ));
            }
            _ => {}
        }
        Ok(ModelSpec {
            variant,
            layer_sizes,
            tied: true,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// `[d, n_1, ..., n_L]`.
    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    /// Number of hidden layers L (0 for the linear baseline).
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Input dimension d.
    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn size(&self, layer: usize) -> usize {
        self.layer_sizes[layer]
    }

    pub fn tied(&self) -> bool {
        self.tied
    }

    /// n_2 / n_1 for two-hidden-layer models.
    pub fn alpha(&self) -> Option<f64> {
        if self.depth() == 2 {
            Some(self.layer_sizes[2] as f64 / self.layer_sizes[1] as f64)
        } else {
            None
        }
    }

    /// Whether a gated lateral connection exists at `level` (1..=L).
    pub fn has_lateral_at(&self, level: usize) -> bool {
        self.variant.has_lateral() && level >= 1 && level <= self.depth()
    }

    /// Whether the decoder has a bias `b_g` at `level` (0..L).
    pub fn has_dec_bias_at(&self, level: usize) -> bool {
        if level == 0 {
            return true;
        }
        if level >= self.depth() {
            return false;
        }
        // Middle levels: the Mod decoder folds b_g into the gate bias.
        matches!(self.variant, Variant::NoLat | Variant::Add)
    }
}

/// Identity of one trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    /// Encoder weight `W_f^(l)`, shape (n_l, n_{l-1}), l in 1..=L.
    EncW(usize),
    /// Encoder bias `b_f^(l)`.
    EncB(usize),
    /// Decoder bias `b_g^(level)`, level in 0..L.
    DecB(usize),
    /// Lateral gain `a^(level)`.
    LatA(usize),
    /// Lateral bias `b_a^(level)` (added to h before gating).
    LatBa(usize),
    /// Lateral gate bias `b_b^(level)`.
    LatBb(usize),
    /// Free weight matrix of the linear baseline.
    LinW,
}

impl TensorRole {
    pub fn name(&self) -> String {
        match self {
            TensorRole::EncW(l) => format!("enc_w.{l}"),
            TensorRole::EncB(l) => format!("enc_b.{l}"),
            TensorRole::DecB(l) => format!("dec_b.{l}"),
            TensorRole::LatA(l) => format!("lat_a.{l}"),
            TensorRole::LatBa(l) => format!("lat_ba.{l}"),
            TensorRole::LatBb(l) => format!("lat_bb.{l}"),
            TensorRole::LinW => "lin_w".into(),
        }
    }
}

/// Shape of one trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorShape {
    Mat(usize, usize),
    Vector(usize),
}

impl TensorShape {
    pub fn len(&self) -> usize {
        match *self {
            TensorShape::Mat(r, c) => r * c,
            TensorShape::Vector(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One trainable tensor. All arrays are kept in standard (row-major,
/// contiguous) layout so they can be viewed as flat slices.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor<F> {
    Mat(Array2<F>),
    Vector(Array1<F>),
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: TensorShape) -> Tensor<F> {
        match shape {
            TensorShape::Mat(r, c) => Tensor::Mat(Array2::zeros((r, c))),
            TensorShape::Vector(n) => Tensor::Vector(Array1::zeros(n)),
        }
    }

    pub fn shape(&self) -> TensorShape {
        match self {
            Tensor::Mat(m) => TensorShape::Mat(m.nrows(), m.ncols()),
            Tensor::Vector(v) => TensorShape::Vector(v.len()),
        }
    }

    pub fn len(&self) -> usize {
        self.shape().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_slice(&self) -> &[F] {
        match self {
            Tensor::Mat(m) => m.as_slice().expect("standard layout"),
            Tensor::Vector(v) => v.as_slice().expect("standard layout"),
        }
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        match self {
            Tensor::Mat(m) => m.as_slice_mut().expect("standard layout"),
            Tensor::Vector(v) => v.as_slice_mut().expect("standard layout"),
        }
    }

    pub fn as_mat(&self) -> &Array2<F> {
        match self {
            Tensor::Mat(m) => m,
            Tensor::Vector(_) => panic!("expected matrix tensor"),
        }
    }

    pub fn as_vec(&self) -> &Array1<F> {
        match self {
            Tensor::Vector(v) => v,
            Tensor::Mat(_) => panic!("expected vector tensor"),
        }
    }
}

/// Fixed, deterministic enumeration of the trainable tensors of a spec.
/// This order defines gradient/optimizer-state alignment and the
/// checkpoint layout.
pub fn trainable_layout(spec: &ModelSpec) -> Vec<(TensorRole, TensorShape)> {
    let sizes = spec.layer_sizes();
    let depth = spec.depth();
    let mut out = Vec::new();
    if spec.variant() == Variant::Linear {
        let d = spec.input_dim();
        out.push((TensorRole::LinW, TensorShape::Mat(d, d)));
        out.push((TensorRole::DecB(0), TensorShape::Vector(d)));
        return out;
    }
    for l in 1..=depth {
        out.push((TensorRole::EncW(l), TensorShape::Mat(sizes[l], sizes[l - 1])));
        out.push((TensorRole::EncB(l), TensorShape::Vector(sizes[l])));
    }
    for level in 0..depth {
        if spec.has_dec_bias_at(level) {
            out.push((TensorRole::DecB(level), TensorShape::Vector(sizes[level])));
        }
    }
    for level in 1..=depth {
        if spec.has_lateral_at(level) {
            out.push((TensorRole::LatA(level), TensorShape::Vector(sizes[level])));
            out.push((TensorRole::LatBa(level), TensorShape::Vector(sizes[level])));
            out.push((TensorRole::LatBb(level), TensorShape::Vector(sizes[level])));
        }
    }
    out
}

/// Total trainable parameter count, with each tied decoder matrix counted
/// again on top of its encoder original. Centering offsets are excluded.
pub fn count_params(spec: &ModelSpec) -> usize {
    let mut n: usize = trainable_layout(spec)
        .iter()
        .map(|(_, shape)| shape.len())
        .sum();
    if spec.variant() != Variant::Linear {
        let sizes = spec.layer_sizes();
        for level in 0..spec.depth() {
            n += sizes[level] * sizes[level + 1];
        }
    }
    n
}

/// Largest layer sizes that fit `budget` parameters.
///
/// For one hidden layer the answer is the largest feasible n_1; for two,
/// n_2 is slaved to `alpha` via n_2 = max(1, round(alpha * n_1)) and the
/// largest feasible n_1 wins. Counts are monotone in n_1, so a binary
/// search is exact.
pub fn solve_layer_sizes(
    budget: usize,
    alpha: f64,
    variant: Variant,
    d: usize,
    depth: usize,
) -> Result<Vec<usize>, SpecError> {
    let sizes_for = |n1: usize| -> Result<Vec<usize>, SpecError> {
        match depth {
            0 => Ok(vec![d]),
            1 => Ok(vec![d, n1]),
            2 => {
                let n2 = ((alpha * n1 as f64).round() as usize).max(1);
                Ok(vec![d, n1, n2])
            }
            _ => Err(SpecError::BadSizes(format!(
                "size solver supports at most 2 hidden layers, got {depth}"
            ))),
        }
    };
    if variant == Variant::Linear || depth == 0 {
        let spec = ModelSpec::new(Variant::Linear, vec![d])?;
        if count_params(&spec) > budget {
            return Err(SpecError::NoFeasibleSize { budget });
        }
        return Ok(vec![d]);
    }
    if depth == 2 && alpha <= 0.0 {
        return Err(SpecError::BadSizes("alpha must be > 0 for L=2".into()));
    }
    let count_at = |n1: usize| -> Result<usize, SpecError> {
        Ok(count_params(&ModelSpec::new(variant, sizes_for(n1)?)?))
    };
    if count_at(1)? > budget {
        return Err(SpecError::NoFeasibleSize { budget });
    }
    // Exponential bracket then bisect on the monotone count.
    let mut hi = 1usize;
    while count_at(hi)? <= budget {
        hi *= 2;
    }
    let mut lo = hi / 2; // feasible
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if count_at(mid)? <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    sizes_for(lo)
}

/// All learnable tensors of one model, plus the non-gradient centering
/// offsets beta (one per hidden layer).
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F: Real> {
    spec: ModelSpec,
    roles: Vec<TensorRole>,
    tensors: Vec<Tensor<F>>,
    beta: Vec<Array1<F>>,
    index: Layout,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    enc_w: Vec<usize>,
    enc_b: Vec<usize>,
    dec_b: Vec<Option<usize>>,
    lat_a: Vec<Option<usize>>,
    lat_ba: Vec<Option<usize>>,
    lat_bb: Vec<Option<usize>>,
    lin_w: Option<usize>,
}

impl Layout {
    fn build(spec: &ModelSpec, roles: &[TensorRole]) -> Layout {
        let depth = spec.depth();
        let mut layout = Layout {
            enc_w: vec![usize::MAX; depth + 1],
            enc_b: vec![usize::MAX; depth + 1],
            dec_b: vec![None; depth.max(1)],
            lat_a: vec![None; depth + 1],
            lat_ba: vec![None; depth + 1],
            lat_bb: vec![None; depth + 1],
            lin_w: None,
        };
        for (idx, role) in roles.iter().enumerate() {
            match *role {
                TensorRole::EncW(l) => layout.enc_w[l] = idx,
                TensorRole::EncB(l) => layout.enc_b[l] = idx,
                TensorRole::DecB(l) => layout.dec_b[l] = Some(idx),
                TensorRole::LatA(l) => layout.lat_a[l] = Some(idx),
                TensorRole::LatBa(l) => layout.lat_ba[l] = Some(idx),
                TensorRole::LatBb(l) => layout.lat_bb[l] = Some(idx),
                TensorRole::LinW => layout.lin_w = Some(idx),
            }
        }
        layout
    }
}

impl<F: Real> Params<F> {
    /// All-zero parameters (used by tests and as a deserialization shell).
    pub fn zeros(spec: &ModelSpec) -> Params<F> {
        let layout = trainable_layout(spec);
        let roles: Vec<TensorRole> = layout.iter().map(|(r, _)| *r).collect();
        let tensors: Vec<Tensor<F>> = layout.iter().map(|(_, s)| Tensor::zeros(*s)).collect();
        let beta = (1..=spec.depth())
            .map(|l| Array1::zeros(spec.size(l)))
            .collect();
        let index = Layout::build(spec, &roles);
        Params {
            spec: spec.clone(),
            roles,
            tensors,
            beta,
            index,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn roles(&self) -> &[TensorRole] {
        &self.roles
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<F> {
        &self.tensors[idx]
    }

    pub fn enc_w(&self, l: usize) -> &Array2<F> {
        self.tensors[self.index.enc_w[l]].as_mat()
    }

    pub fn enc_b(&self, l: usize) -> &Array1<F> {
        self.tensors[self.index.enc_b[l]].as_vec()
    }

    pub fn dec_b(&self, level: usize) -> Option<&Array1<F>> {
        self.index.dec_b[level].map(|i| self.tensors[i].as_vec())
    }

    pub fn lat_a(&self, level: usize) -> Option<&Array1<F>> {
        self.index.lat_a[level].map(|i| self.tensors[i].as_vec())
    }

    pub fn lat_ba(&self, level: usize) -> Option<&Array1<F>> {
        self.index.lat_ba[level].map(|i| self.tensors[i].as_vec())
    }

    pub fn lat_bb(&self, level: usize) -> Option<&Array1<F>> {
        self.index.lat_bb[level].map(|i| self.tensors[i].as_vec())
    }

    pub fn lin_w(&self) -> &Array2<F> {
        self.tensors[self.index.lin_w.expect("linear variant")].as_mat()
    }

    pub fn beta(&self, l: usize) -> &Array1<F> {
        &self.beta[l - 1]
    }

    pub fn beta_mut(&mut self, l: usize) -> &mut Array1<F> {
        &mut self.beta[l - 1]
    }

    pub fn betas(&self) -> &[Array1<F>] {
        &self.beta
    }

    pub fn betas_mut(&mut self) -> &mut [Array1<F>] {
        &mut self.beta
    }

    /// Tied decoder weight `W_g^(level)` as a (n_level, n_{level+1}) view of
    /// the canonical encoder tensor.
    pub fn dec_w(&self, level: usize) -> ndarray::ArrayView2<'_, F> {
        self.enc_w(level + 1).t()
    }

    pub fn tensor_index_of(&self, role: TensorRole) -> Option<usize> {
        match role {
            TensorRole::EncW(l) => self.index.enc_w.get(l).copied().filter(|&i| i != usize::MAX),
            TensorRole::EncB(l) => self.index.enc_b.get(l).copied().filter(|&i| i != usize::MAX),
            TensorRole::DecB(l) => self.index.dec_b.get(l).copied().flatten(),
            TensorRole::LatA(l) => self.index.lat_a.get(l).copied().flatten(),
            TensorRole::LatBa(l) => self.index.lat_ba.get(l).copied().flatten(),
            TensorRole::LatBb(l) => self.index.lat_bb.get(l).copied().flatten(),
            TensorRole::LinW => self.index.lin_w,
        }
    }

    /// Total number of trainable scalars actually stored (tied copies not
    /// double-counted, beta excluded).
    pub fn stored_len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Gradients, one tensor per trainable tensor, aligned with
/// `Params::tensors`. Tied pairs accumulate into the single canonical
/// tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<F: Real> {
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Real> Grads<F> {
    pub fn zeros_like(params: &Params<F>) -> Grads<F> {
        Grads {
            tensors: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.as_slice().iter().all(|v| v.is_finite()))
    }
}

/// Draw Gaussian weights, rescale rows to unit norm, orthogonalize
/// (modified Gram-Schmidt) and re-normalize. When a layer is wider than
/// its input only the first `cols` rows can be mutually orthogonal; the
/// rest are left at unit norm and a warning is logged.
pub fn init_params<F: Real, R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Params<F> {
    let mut params = Params::zeros(spec);
    for idx in 0..params.tensors.len() {
        if let Tensor::Mat(ref mut w) = params.tensors[idx] {
            let (rows, cols) = (w.nrows(), w.ncols());
            for v in w.iter_mut() {
                *v = F::standard_normal(rng);
            }
            orthonormalize_rows(w, rng);
            if rows > cols {
                log::warn!(
                    "{}: {rows} rows > {cols} columns; orthogonalized the first {cols} rows only",
                    params.roles[idx].name()
                );
            }
        }
    }
    params
}

fn orthonormalize_rows<F: Real, R: Rng + ?Sized>(w: &mut Array2<F>, rng: &mut R) {
    let (rows, cols) = (w.nrows(), w.ncols());
    let tiny = F::of_f64(1e-12);
    for i in 0..rows {
        for _attempt in 0..4 {
            if i < cols {
                for j in 0..i {
                    let dot = w.row(j).dot(&w.row(i));
                    let prev = w.row(j).to_owned();
                    let mut row = w.row_mut(i);
                    row.zip_mut_with(&prev, |r, &p| *r = *r - dot * p);
                }
            }
            let norm = w.row(i).dot(&w.row(i)).sqrt();
            if norm > tiny {
                let inv = F::one() / norm;
                w.row_mut(i).mapv_inplace(|v| v * inv);
                break;
            }
            // Degenerate draw; replace the row and try again.
            for v in w.row_mut(i).iter_mut() {
                *v = F::standard_normal(rng);
            }
        }
    }
}

pub fn relu<F: Real>(z: &Array2<F>) -> Array2<F> {
    z.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// Derivative of the rectifier, defined as 0 at exactly 0.
pub fn relu_grad<F: Real>(z: &Array2<F>) -> Array2<F> {
    z.mapv(|v| if v > F::zero() { F::one() } else { F::zero() })
}

pub fn sigmoid<F: Real>(t: &Array2<F>) -> Array2<F> {
    t.mapv(|v| F::one() / (F::one() + (-v).exp()))
}

/// Everything the forward pass produces for one mini-batch.
///
/// Layer indexing: `h[0]` is the corrupted input, `h[l]` and `z[l]` the
/// hidden activations / pre-activations for l in 1..=L, `hhat[l]` the
/// decoder reconstructions, `gate[l]` the lateral gate sigmoid where the
/// variant has one, and `dec_pre[l]` the decoder rectifier input for
/// NoLat/Add middle levels.
#[derive(Debug, Clone)]
pub struct Activations<F: Real> {
    h: Vec<Array2<F>>,
    z: Vec<Array2<F>>,
    hhat: Vec<Array2<F>>,
    gate: Vec<Option<Array2<F>>>,
    dec_pre: Vec<Option<Array2<F>>>,
    pub xhat: Array2<F>,
}

impl<F: Real> Activations<F> {
    pub fn x_tilde(&self) -> &Array2<F> {
        &self.h[0]
    }

    pub fn h(&self, l: usize) -> &Array2<F> {
        &self.h[l]
    }

    pub fn z(&self, l: usize) -> &Array2<F> {
        &self.z[l]
    }

    pub fn hhat(&self, l: usize) -> &Array2<F> {
        &self.hhat[l]
    }

    pub fn gate(&self, l: usize) -> Option<&Array2<F>> {
        self.gate[l].as_ref()
    }

    pub fn dec_pre(&self, l: usize) -> Option<&Array2<F>> {
        self.dec_pre[l].as_ref()
    }

    pub fn batch(&self) -> usize {
        self.h[0].nrows()
    }

    pub fn all_finite(&self) -> bool {
        self.xhat.iter().all(|v| v.is_finite())
            && self.h.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Every rectifier input in the graph, for kink detection in the
    /// finite-difference harness.
    pub fn relu_inputs(&self) -> impl Iterator<Item = &Array2<F>> {
        self.z
            .iter()
            .skip(1)
            .chain(self.dec_pre.iter().filter_map(|v| v.as_ref()))
    }
}

/// Lateral unit: `(h + b_a) * sigmoid(a * h + extra + b_b)`, with the gate
/// kept for the backward pass.
fn lateral<F: Real>(
    h: &Array2<F>,
    a: &Array1<F>,
    ba: &Array1<F>,
    bb: &Array1<F>,
    extra: Option<&Array2<F>>,
) -> (Array2<F>, Array2<F>) {
    let mut t = h * a;
    if let Some(e) = extra {
        t += e;
    }
    t += bb;
    let s = sigmoid(&t);
    let out = (h + ba) * &s;
    (out, s)
}

/// Forward pass of one mini-batch of corrupted inputs (batch x d).
pub fn forward<F: Real>(params: &Params<F>, x_tilde: &Array2<F>) -> Activations<F> {
    let spec = params.spec();
    let depth = spec.depth();
    assert_eq!(
        x_tilde.ncols(),
        spec.input_dim(),
        "input dimension mismatch"
    );

    let mut h: Vec<Array2<F>> = Vec::with_capacity(depth + 1);
    let mut z: Vec<Array2<F>> = Vec::with_capacity(depth + 1);
    h.push(x_tilde.clone());
    z.push(Array2::zeros((0, 0))); // placeholder; z[0] is never used

    for l in 1..=depth {
        let zl = h[l - 1].dot(&params.enc_w(l).t()) + params.enc_b(l);
        let hl = relu(&zl) + params.beta(l);
        z.push(zl);
        h.push(hl);
    }

    let mut hhat: Vec<Array2<F>> = vec![Array2::zeros((0, 0)); depth + 1];
    let mut gate: Vec<Option<Array2<F>>> = vec![None; depth + 1];
    let mut dec_pre: Vec<Option<Array2<F>>> = vec![None; depth + 1];

    if spec.variant() == Variant::Linear {
        let xhat = x_tilde.dot(&params.lin_w().t()) + params.dec_b(0).expect("lin bias");
        return Activations {
            h,
            z,
            hhat,
            gate,
            dec_pre,
            xhat,
        };
    }

    // Top level.
    match spec.variant() {
        Variant::NoLat => {
            hhat[depth] = h[depth].clone();
        }
        Variant::Add | Variant::Mod => {
            let (out, s) = lateral(
                &h[depth],
                params.lat_a(depth).unwrap(),
                params.lat_ba(depth).unwrap(),
                params.lat_bb(depth).unwrap(),
                None,
            );
            hhat[depth] = out;
            gate[depth] = Some(s);
        }
        Variant::Linear => unreachable!(),
    }

    // Middle levels, top down.
    for l in (1..depth).rev() {
        let u = hhat[l + 1].dot(params.enc_w(l + 1));
        match spec.variant() {
            Variant::NoLat => {
                let v = u + params.dec_b(l).unwrap();
                hhat[l] = relu(&v);
                dec_pre[l] = Some(v);
            }
            Variant::Add => {
                let v = u + params.dec_b(l).unwrap();
                let (lat, s) = lateral(
                    &h[l],
                    params.lat_a(l).unwrap(),
                    params.lat_ba(l).unwrap(),
                    params.lat_bb(l).unwrap(),
                    None,
                );
                hhat[l] = lat + relu(&v);
                gate[l] = Some(s);
                dec_pre[l] = Some(v);
            }
            Variant::Mod => {
                let (out, s) = lateral(
                    &h[l],
                    params.lat_a(l).unwrap(),
                    params.lat_ba(l).unwrap(),
                    params.lat_bb(l).unwrap(),
                    Some(&u),
                );
                hhat[l] = out;
                gate[l] = Some(s);
            }
            Variant::Linear => unreachable!(),
        }
    }

    // Bottom: affine, no nonlinearity.
    let xhat = hhat[1].dot(params.enc_w(1)) + params.dec_b(0).expect("bottom bias");

    Activations {
        h,
        z,
        hhat,
        gate,
        dec_pre,
        xhat,
    }
}

/// Mean squared error per element, accumulated in f64.
pub fn reconstruction_cost<F: Real>(xhat: &Array2<F>, x: &Array2<F>) -> f64 {
    assert_eq!(xhat.dim(), x.dim(), "shape mismatch");
    let mut acc = 0.0f64;
    for (a, b) in xhat.iter().zip(x.iter()) {
        let r = a.as_f64() - b.as_f64();
        acc += r * r;
    }
    acc / (xhat.nrows() as f64 * xhat.ncols() as f64)
}

/// Drive the hidden-unit centering offsets toward zero output mean:
/// `beta^(l) -= decay * mean_batch(h^(l))`. Beta is not part of the
/// gradient or the parameter budget.
pub fn update_centering<F: Real>(params: &mut Params<F>, acts: &Activations<F>, decay: f64) {
    assert!(decay > 0.0 && decay <= 1.0, "decay must be in (0, 1]");
    let depth = params.spec().depth();
    let rate = F::of_f64(decay);
    for l in 1..=depth {
        let mean = acts.h(l).mean_axis(Axis(0)).expect("nonempty batch");
        params
            .beta_mut(l)
            .zip_mut_with(&mean, |b, &m| *b = *b - rate * m);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn spec(variant: Variant, sizes: &[usize]) -> ModelSpec {
        ModelSpec::new(variant, sizes.to_vec()).unwrap()
    }

    #[test]
    fn count_matches_enumerated_budget_specs() {
        assert_eq!(count_params(&spec(Variant::NoLat, &[256, 1948])), 999_580);
        assert_eq!(count_params(&spec(Variant::Add, &[256, 1937])), 999_748);
        assert_eq!(count_params(&spec(Variant::Mod, &[256, 1937])), 999_748);
        assert_eq!(count_params(&spec(Variant::Mod, &[256, 1622, 50])), 999_608);
    }

    #[test]
    fn count_linear() {
        assert_eq!(count_params(&spec(Variant::Linear, &[256])), 256 * 256 + 256);
    }

    #[test]
    fn count_two_layer_nolat_and_add() {
        // NoLat L=2: 2*d*n1 + 2*n1*n2 + 2*n1 + n2 + d
        assert_eq!(
            count_params(&spec(Variant::NoLat, &[256, 590, 589])),
            2 * 256 * 590 + 2 * 590 * 589 + 2 * 590 + 589 + 256
        );
        // Add L=2 has one extra middle decoder bias vs Mod.
        assert_eq!(
            count_params(&spec(Variant::Add, &[256, 839, 336])),
            count_params(&spec(Variant::Mod, &[256, 839, 336])) + 839
        );
    }

    #[test]
    fn solve_reproduces_one_layer_table_size() {
        let sizes = solve_layer_sizes(1_000_000, 0.0, Variant::NoLat, 256, 1).unwrap();
        assert_eq!(sizes, vec![256, 1948]);
    }

    #[test]
    fn solve_two_layer_is_maximal_and_within_budget() {
        let budget = 1_000_000;
        let sizes = solve_layer_sizes(budget, 0.03, Variant::Mod, 256, 2).unwrap();
        let n1 = sizes[1];
        let n2 = sizes[2];
        assert!(count_params(&spec(Variant::Mod, &sizes)) <= budget);
        let expected_n2 = ((0.03 * n1 as f64).round() as usize).max(1);
        assert!((n2 as i64 - expected_n2 as i64).abs() <= 1);
        // The published configuration fits too, and ours is at least as large.
        assert!(n1 >= 1622);
        // Maximality: n1 + 1 with its slaved n2 busts the budget.
        let next = vec![256, n1 + 1, (((0.03 * (n1 + 1) as f64).round()) as usize).max(1)];
        assert!(count_params(&spec(Variant::Mod, &next)) > budget);
    }

    #[test]
    fn solve_rejects_degenerate_budget() {
        let err = solve_layer_sizes(100, 1.0, Variant::NoLat, 256, 1).unwrap_err();
        assert!(matches!(err, SpecError::NoFeasibleSize { .. }));
    }

    #[test]
    fn budget_invariant_over_a_grid() {
        for &variant in &[Variant::NoLat, Variant::Add, Variant::Mod] {
            for &alpha in &[0.03, 0.2, 0.5, 1.0, 2.0] {
                for &budget in &[20_000usize, 100_000, 1_000_000] {
                    let sizes = solve_layer_sizes(budget, alpha, variant, 256, 2).unwrap();
                    assert!(count_params(&spec(variant, &sizes)) <= budget);
                }
            }
        }
    }

    #[test]
    fn init_is_row_orthonormal() {
        let mut rng = stream_rng(3, Stream::Init);
        let p: Params<f64> = init_params(&spec(Variant::NoLat, &[48, 32]), &mut rng);
        let w = p.enc_w(1);
        let gram = w.dot(&w.t());
        for i in 0..w.nrows() {
            for j in 0..w.nrows() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(gram[[i, j]], expect, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn init_row_norms_are_unit_even_when_overcomplete() {
        let mut rng = stream_rng(5, Stream::Init);
        let p: Params<f64> = init_params(&spec(Variant::Mod, &[8, 20, 4]), &mut rng);
        for l in 1..=2 {
            let w = p.enc_w(l);
            for row in w.rows() {
                assert_abs_diff_eq!(row.dot(&row).sqrt(), 1.0, epsilon = 1e-9);
            }
        }
        // Laterals, biases and beta start at zero.
        assert!(p.lat_a(1).unwrap().iter().all(|&v| v == 0.0));
        assert!(p.enc_b(1).iter().all(|&v| v == 0.0));
        assert!(p.beta(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_deterministic_under_seed() {
        let a: Params<f32> =
            init_params(&spec(Variant::Add, &[8, 6, 3]), &mut stream_rng(11, Stream::Init));
        let b: Params<f32> =
            init_params(&spec(Variant::Add, &[8, 6, 3]), &mut stream_rng(11, Stream::Init));
        for (ta, tb) in a.tensors().iter().zip(b.tensors().iter()) {
            let (sa, sb) = (ta.as_slice(), tb.as_slice());
            assert_eq!(sa.len(), sb.len());
            assert!(sa.iter().zip(sb).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    /// Scalar Mod rig with one unit per layer; returns hhat(1) for the
    /// given middle-lateral parameters and input.
    fn scalar_mod(x: f64, a1: f64, ba1: f64, bb1: f64) -> f64 {
        let s = spec(Variant::Mod, &[1, 1, 1]);
        let mut p: Params<f64> = Params::zeros(&s);
        // W1 = 1 so h1 = relu(x); W2 = 0, top lateral all zero so hhat2 = 0
        // and the top-down term into the middle is 0.
        if let Tensor::Mat(w) = &mut p.tensors_mut()[0] {
            w[[0, 0]] = 1.0;
        }
        let set = |p: &mut Params<f64>, role: TensorRole, v: f64| {
            let idx = p.tensor_index_of(role).unwrap();
            p.tensors_mut()[idx].as_mut_slice()[0] = v;
        };
        set(&mut p, TensorRole::LatA(1), a1);
        set(&mut p, TensorRole::LatBa(1), ba1);
        set(&mut p, TensorRole::LatBb(1), bb1);
        let acts = forward(&p, &array![[x]]);
        acts.hhat(1)[[0, 0]]
    }

    #[test]
    fn mod_middle_unit_hand_case() {
        // (2 + 1) * sigmoid(0) = 1.5
        assert_abs_diff_eq!(scalar_mod(2.0, 0.0, 1.0, 0.0), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn mod_single_unit_sigmoid_of_one() {
        // (1 + 0) * sigmoid(1*1 + 0 + 0) = sigmoid(1)
        assert_abs_diff_eq!(
            scalar_mod(1.0, 1.0, 0.0, 0.0),
            0.7310585786300049,
            epsilon = 1e-12
        );
    }

    #[test]
    fn add_middle_unit_rectifier_kills_negative_topdown() {
        let s = spec(Variant::Add, &[1, 1, 1]);
        let mut p: Params<f64> = Params::zeros(&s);
        let set = |p: &mut Params<f64>, role: TensorRole, v: f64| {
            let idx = p.tensor_index_of(role).unwrap();
            p.tensors_mut()[idx].as_mut_slice()[0] = v;
        };
        // h1 = relu(0) = 0; h2 = relu(W2*0 + b2) = 1; top lateral zero ->
        // hhat2 = (1+0)*sigmoid(0) = 0.5; u1 = 0.5 * W2 = -1.
        set(&mut p, TensorRole::EncB(2), 1.0);
        set(&mut p, TensorRole::EncW(2), -2.0);
        let acts = forward(&p, &array![[0.0]]);
        assert_abs_diff_eq!(acts.hhat(2)[[0, 0]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(acts.dec_pre(1).unwrap()[[0, 0]], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(acts.hhat(1)[[0, 0]], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn nolat_zero_params_is_zero_map() {
        let s = spec(Variant::NoLat, &[4, 3]);
        let p: Params<f64> = Params::zeros(&s);
        let x = array![[0.5, -1.0, 2.0, 0.25], [1.0, 0.0, -0.5, 3.0]];
        let acts = forward(&p, &x);
        assert!(acts.xhat.iter().all(|&v| v == 0.0));
        let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / 8.0;
        assert_abs_diff_eq!(reconstruction_cost(&acts.xhat, &x), mean_sq, epsilon = 1e-12);
    }

    #[test]
    fn add_and_mod_identical_for_one_hidden_layer() {
        let mut rng = stream_rng(17, Stream::Init);
        let pa: Params<f64> = init_params(&spec(Variant::Add, &[6, 4]), &mut rng);
        let mut rng = stream_rng(17, Stream::Init);
        let pm: Params<f64> = init_params(&spec(Variant::Mod, &[6, 4]), &mut rng);
        let mut rng = stream_rng(17, Stream::Sample);
        let x = Array2::from_shape_fn((5, 6), |_| f64::standard_normal(&mut rng));
        let fa = forward(&pa, &x);
        let fm = forward(&pm, &x);
        assert_eq!(fa.xhat, fm.xhat);
    }

    #[test]
    fn cost_identity_is_zero() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(reconstruction_cost(&x, &x), 0.0);
    }

    #[test]
    fn centering_fixed_point_and_full_replacement() {
        let s = spec(Variant::NoLat, &[2, 3]);
        let mut p: Params<f64> = Params::zeros(&s);
        // Zero-mean activations leave beta unchanged.
        let acts = forward(&p, &array![[0.0, 0.0], [0.0, 0.0]]);
        update_centering(&mut p, &acts, 0.5);
        assert!(p.beta(1).iter().all(|&b| b == 0.0));

        // Constant post-activation c with decay 1: beta = -c after one step.
        let c = 0.75;
        let mut p: Params<f64> = Params::zeros(&s);
        let idx = p.tensor_index_of(TensorRole::EncB(1)).unwrap();
        for v in p.tensors_mut()[idx].as_mut_slice() {
            *v = c;
        }
        let acts = forward(&p, &array![[0.0, 0.0], [0.0, 0.0]]);
        update_centering(&mut p, &acts, 1.0);
        for &b in p.beta(1).iter() {
            assert_abs_diff_eq!(b, -c, epsilon = 1e-12);
        }
    }

    #[test]
    fn centering_converges_geometrically() {
        // Constant post-rectifier activation 1, decay 0.99: beta -> -1, and
        // after 1000 updates the gap (1 - 0.99)^1000 is far below 1e-4.
        let s = spec(Variant::NoLat, &[2, 3]);
        let mut p: Params<f64> = Params::zeros(&s);
        let idx = p.tensor_index_of(TensorRole::EncB(1)).unwrap();
        for v in p.tensors_mut()[idx].as_mut_slice() {
            *v = 1.0;
        }
        let x = array![[0.0, 0.0]];
        for _ in 0..1000 {
            let acts = forward(&p, &x);
            update_centering(&mut p, &acts, 0.99);
        }
        for &b in p.beta(1).iter() {
            assert!((b + 1.0).abs() < 1e-4, "beta = {b}");
        }
    }

    #[test]
    fn relu_truth_table_and() {
        // Single rectifier unit, weights [1,1,1], bias -2: AND of 3 bits.
        let s = spec(Variant::NoLat, &[3, 1]);
        let mut p: Params<f64> = Params::zeros(&s);
        if let Tensor::Mat(w) = &mut p.tensors_mut()[0] {
            w.fill(1.0);
        }
        let bidx = p.tensor_index_of(TensorRole::EncB(1)).unwrap();
        p.tensors_mut()[bidx].as_mut_slice()[0] = -2.0;
        for bits in 0..8u8 {
            let x = array![[
                f64::from(bits & 1),
                f64::from((bits >> 1) & 1),
                f64::from((bits >> 2) & 1)
            ]];
            let acts = forward(&p, &x);
            let expected = f64::from(u8::from(bits == 0b111));
            assert_eq!(acts.h(1)[[0, 0]], expected, "bits {bits:03b}");
        }
    }

    #[test]
    fn relu_truth_table_or() {
        // Weights [-1,-1,-1], bias 1, output 1 - relu(z): OR of 3 bits.
        let s = spec(Variant::NoLat, &[3, 1]);
        let mut p: Params<f64> = Params::zeros(&s);
        if let Tensor::Mat(w) = &mut p.tensors_mut()[0] {
            w.fill(-1.0);
        }
        let bidx = p.tensor_index_of(TensorRole::EncB(1)).unwrap();
        p.tensors_mut()[bidx].as_mut_slice()[0] = 1.0;
        for bits in 0..8u8 {
            let x = array![[
                f64::from(bits & 1),
                f64::from((bits >> 1) & 1),
                f64::from((bits >> 2) & 1)
            ]];
            let acts = forward(&p, &x);
            let or = 1.0 - acts.h(1)[[0, 0]];
            let expected = f64::from(u8::from(bits != 0));
            assert_eq!(or, expected, "bits {bits:03b}");
        }
    }

    #[test]
    fn mod_gate_is_sign_conditionally_monotone() {
        // For a Mod middle unit, increasing the top-down input never
        // decreases hhat when (h + b_a) > 0 and never increases it when
        // (h + b_a) < 0.
        let gate = |h: f64, ba: f64, u: f64| (h + ba) / (1.0 + (-(0.3 * h + u + 0.1)).exp());
        for &(h, ba) in &[(1.5, 0.2), (0.3, -1.0), (0.0, 0.5), (2.0, -3.0)] {
            let mut prev = gate(h, ba, -4.0);
            let mut u = -4.0;
            while u < 4.0 {
                u += 0.25;
                let cur = gate(h, ba, u);
                if h + ba > 0.0 {
                    assert!(cur >= prev - 1e-12);
                } else if h + ba < 0.0 {
                    assert!(cur <= prev + 1e-12);
                }
                prev = cur;
            }
        }
    }
}
