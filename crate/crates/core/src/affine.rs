//! Affine state updates `s_t = E_t ▶ s_{t-1} + f_t` and their monoid.
//!
//! Pairs combine as `(E₂, f₂) ⊕ (E₁, f₁) = (E₂ ∘ E₁, f₂ + E₂ ▶ f₁)` with
//! identity `(I, 0)`. Folding the pairs of a sequence yields `(Ē_t, s_t)`, so
//! any scan over [`AffineAggregator`] recovers the recurrent states.
//!
//! Transitions come in three kinds: full matrices (acting from the left or the
//! right of the state), state-shaped diagonal gates acting pointwise, and
//! scalars.

use std::fmt;
use std::str::FromStr;

use crate::error::{PsmError, Result};
use crate::scan::{blelloch, scan_online, Aggregator, BitwiseEq, StateElement};
use crate::tensor::{dot, matmul, seeded_init, sigmoid, Matrix, Vector};
use crate::weights::WeightBundle;

/// Epsilon guard for normalised readouts.
pub const NORMALIZER_EPS: f64 = 1e-9;

/// Default RetNet decay.
pub const DEFAULT_RETNET_GAMMA: f64 = 0.9;

/// A monoid element acting on states.
#[derive(Debug, Clone, PartialEq)]
pub enum Transition {
    /// The unit `I`; acts as a no-op for every kind.
    Identity,
    /// `E ▶ s = E s`; composition `E₂ ∘ E₁ = E₂ E₁`.
    Left(Matrix),
    /// `E ▶ s = s E`; composition `E₂ ∘ E₁ = E₁ E₂`.
    Right(Matrix),
    /// State-shaped gate: `E ▶ s = E ⊙ s`.
    Diagonal(Matrix),
    Scalar(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionKind {
    Identity,
    Full,
    Diagonal,
    Scalar,
}

impl Transition {
    pub fn kind(&self) -> TransitionKind {
        match self {
            Transition::Identity => TransitionKind::Identity,
            Transition::Left(_) | Transition::Right(_) => TransitionKind::Full,
            Transition::Diagonal(_) => TransitionKind::Diagonal,
            Transition::Scalar(_) => TransitionKind::Scalar,
        }
    }

    /// `self ∘ earlier`: apply `earlier` first, then `self`.
    pub fn compose(&self, earlier: &Transition) -> Result<Transition> {
        use Transition::*;
        Ok(match (self, earlier) {
            (Identity, e) => e.clone(),
            (e, Identity) => e.clone(),
            (Left(a), Left(b)) => Left(matmul(a, b)?),
            (Right(a), Right(b)) => Right(matmul(b, a)?),
            (Diagonal(a), Diagonal(b)) => Diagonal(a.hadamard(b)?),
            (Scalar(a), Scalar(b)) => Scalar(a * b),
            (a, b) => {
                return Err(PsmError::AffineMismatch(format!(
                    "cannot compose {:?} with {:?}",
                    a.kind(),
                    b.kind()
                )))
            }
        })
    }

    /// `self ▶ s`.
    pub fn act(&self, s: &Matrix) -> Result<Matrix> {
        match self {
            Transition::Identity => Ok(s.clone()),
            Transition::Left(e) => matmul(e, s),
            Transition::Right(e) => matmul(s, e),
            Transition::Diagonal(e) => e.hadamard(s),
            Transition::Scalar(a) => Ok(s.scale(*a)),
        }
    }
}

impl BitwiseEq for Transition {
    fn bitwise_eq(&self, other: &Self) -> bool {
        use Transition::*;
        match (self, other) {
            (Identity, Identity) => true,
            (Left(a), Left(b)) | (Right(a), Right(b)) | (Diagonal(a), Diagonal(b)) => a.bits_eq(b),
            (Scalar(a), Scalar(b)) => a.to_bits() == b.to_bits(),
            _ => false,
        }
    }
}

/// An element `(E, f)` of the affine monoid.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePair {
    pub e: Transition,
    pub f: Matrix,
}

impl AffinePair {
    pub fn new(e: Transition, f: Matrix) -> Self {
        Self { e, f }
    }

    /// `(I, 0)` with a zero state of the given shape.
    pub fn identity(rows: usize, cols: usize) -> Self {
        Self {
            e: Transition::Identity,
            f: Matrix::zeros(rows, cols),
        }
    }
}

impl BitwiseEq for AffinePair {
    fn bitwise_eq(&self, other: &Self) -> bool {
        self.e.bitwise_eq(&other.e) && self.f.bits_eq(&other.f)
    }
}

/// `(E₂, f₂) ⊕ (E₁, f₁) = (E₂ ∘ E₁, f₂ + E₂ ▶ f₁)`; `p2` is the later pair.
pub fn affine_combine(p2: &AffinePair, p1: &AffinePair) -> Result<AffinePair> {
    if p2.f.shape() != p1.f.shape() {
        return Err(PsmError::AffineMismatch(format!(
            "state shapes {:?} and {:?}",
            p2.f.shape(),
            p1.f.shape()
        )));
    }
    let e = p2.e.compose(&p1.e)?;
    let f = p2.f.add(&p2.e.act(&p1.f)?)?;
    Ok(AffinePair { e, f })
}

/// Scan adapter: `combine(earlier, later) = later ⊕ earlier`.
#[derive(Debug, Clone, Copy, Default)]
pub struct AffineAggregator;

impl Aggregator for AffineAggregator {
    type State = AffinePair;

    fn combine(&self, left: &AffinePair, right: &AffinePair) -> AffinePair {
        affine_combine(right, left).expect("pairs in one sequence share kind and shape")
    }

    fn claims_associative(&self) -> bool {
        true
    }
}

/// Direct left-to-right recurrence from `s₋₁ = 0`.
pub fn sequential_affine(pairs: &[AffinePair]) -> Result<Vec<Matrix>> {
    let Some(first) = pairs.first() else {
        return Ok(Vec::new());
    };
    let (rows, cols) = first.f.shape();
    let mut s = Matrix::zeros(rows, cols);
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.f.shape() != (rows, cols) {
            return Err(PsmError::AffineMismatch(format!(
                "state shape {:?}, expected {:?}",
                p.f.shape(),
                (rows, cols)
            )));
        }
        s = p.e.act(&s)?.add(&p.f)?;
        out.push(s.clone());
    }
    Ok(out)
}

/// The ten layer families sharing the affine template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    LinearAttention,
    DeltaNet,
    GatedDeltaNet,
    RetNet,
    Mamba2,
    MLstm,
    GatedRfa,
    S4,
    Mamba,
    Gla,
}

impl LayerKind {
    pub const ALL: [LayerKind; 10] = [
        LayerKind::LinearAttention,
        LayerKind::DeltaNet,
        LayerKind::GatedDeltaNet,
        LayerKind::RetNet,
        LayerKind::Mamba2,
        LayerKind::MLstm,
        LayerKind::GatedRfa,
        LayerKind::S4,
        LayerKind::Mamba,
        LayerKind::Gla,
    ];

    /// Command-line spelling.
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::LinearAttention => "linear-attention",
            LayerKind::DeltaNet => "deltanet",
            LayerKind::GatedDeltaNet => "gated-deltanet",
            LayerKind::RetNet => "retnet",
            LayerKind::Mamba2 => "mamba2",
            LayerKind::MLstm => "mlstm",
            LayerKind::GatedRfa => "gated-rfa",
            LayerKind::S4 => "s4",
            LayerKind::Mamba => "mamba",
            LayerKind::Gla => "gla",
        }
    }

    pub fn transition_kind(self) -> TransitionKind {
        match self {
            LayerKind::LinearAttention => TransitionKind::Identity,
            LayerKind::DeltaNet | LayerKind::GatedDeltaNet => TransitionKind::Full,
            LayerKind::S4 | LayerKind::Mamba | LayerKind::Gla => TransitionKind::Diagonal,
            _ => TransitionKind::Scalar,
        }
    }

    /// Whether the state carries an extra normaliser row.
    pub fn has_normalizer(self) -> bool {
        matches!(self, LayerKind::LinearAttention | LayerKind::MLstm)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerKind {
    type Err = PsmError;

    fn from_str(s: &str) -> Result<Self> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| PsmError::InvalidConfig(format!("unknown layer kind `{s}`")))
    }
}

/// A layer family plus its fixed hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    pub kind: LayerKind,
    /// Token width; keys and values share it.
    pub dim: usize,
    /// Decay used by RetNet only.
    pub retnet_gamma: f64,
}

impl LayerConfig {
    pub fn new(kind: LayerKind, dim: usize) -> Self {
        Self {
            kind,
            dim,
            retnet_gamma: DEFAULT_RETNET_GAMMA,
        }
    }

    /// Shape of the recurrent state: `dim × dim`, plus a normaliser row where
    /// the family keeps one.
    pub fn state_shape(&self) -> (usize, usize) {
        let extra = self.kind.has_normalizer() as usize;
        (self.dim + extra, self.dim)
    }

    /// `(name, rows, cols)` of every parameter the family reads.
    pub fn manifest(&self) -> Vec<(String, usize, usize)> {
        let d = self.dim;
        let mut m = vec![
            ("q_proj".to_string(), d, d),
            ("k_proj".to_string(), d, d),
            ("v_proj".to_string(), d, d),
        ];
        let mut add = |name: &str, r: usize, c: usize| m.push((name.to_string(), r, c));
        match self.kind {
            LayerKind::LinearAttention | LayerKind::RetNet => {}
            LayerKind::DeltaNet => add("beta_proj", 1, d),
            LayerKind::GatedDeltaNet => {
                add("beta_proj", 1, d);
                add("alpha_gate", 1, d);
            }
            LayerKind::Mamba2 => add("gamma_proj", 1, d),
            LayerKind::MLstm => {
                add("forget_proj", 1, d);
                add("input_proj", 1, d);
            }
            LayerKind::GatedRfa => add("g_proj", 1, d),
            LayerKind::S4 => {
                add("s4_alpha", 1, d);
                add("s4_b", d, d);
            }
            LayerKind::Mamba | LayerKind::Gla => add("alpha_proj", d, d),
        }
        m
    }

    /// Seeded parameters matching [`LayerConfig::manifest`].
    pub fn init_weights(&self, seed: u64) -> WeightBundle {
        let scale = 1.0 / (self.dim as f64).sqrt();
        let mut w = WeightBundle::new();
        for (i, (name, r, c)) in self.manifest().into_iter().enumerate() {
            let s = if name == "s4_b" { 1.0 } else { scale };
            let m = seeded_init(r, c, seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64), s);
            w.insert(name, m).expect("manifest names are unique");
        }
        w
    }
}

fn matvec(w: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(PsmError::dim("projection", w.cols(), x.len()));
    }
    Ok((0..w.rows()).map(|r| dot(w.row(r), x)).collect())
}

fn gate(w: &Matrix, x: &[f64]) -> Result<f64> {
    Ok(sigmoid(matvec(w, x)?[0]))
}

fn outer(v: &[f64], k: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(v.len(), k.len());
    for (i, vi) in v.iter().enumerate() {
        for (j, kj) in k.iter().enumerate() {
            m.set(i, j, vi * kj);
        }
    }
    m
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let norm = dot(&v, &v).sqrt().max(NORMALIZER_EPS);
    v.into_iter().map(|x| x / norm).collect()
}

/// `[v; 1]`: the trailing one writes the key into the normaliser row.
fn with_normalizer(mut v: Vec<f64>) -> Vec<f64> {
    v.push(1.0);
    v
}

/// `I - β k kᵀ`, optionally scaled by a gate.
fn projector(k: &[f64], beta: f64, scale: f64) -> Matrix {
    let d = k.len();
    let mut m = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let id = if i == j { 1.0 } else { 0.0 };
            m.set(i, j, scale * (id - beta * k[i] * k[j]));
        }
    }
    m
}

/// Per-token `(E_t, f_t)` for one layer family.
///
/// Gates are sigmoid-squashed linear projections of the token. DeltaNet keys
/// are L2-normalised; the feature map is the identity everywhere.
pub fn make_layer_pairs(cfg: &LayerConfig, inputs: &[Vector], weights: &WeightBundle) -> Result<Vec<AffinePair>> {
    let d = cfg.dim;
    let k_proj = weights.get("k_proj")?;
    let v_proj = weights.get("v_proj")?;

    // state-independent pieces hoisted out of the token loop
    let s4 = if cfg.kind == LayerKind::S4 {
        let alpha = weights.get("s4_alpha")?;
        let b = weights.get("s4_b")?;
        let decay: Vec<f64> = alpha.row(0).iter().map(|a| (-sigmoid(*a)).exp()).collect();
        let mut gate = Matrix::zeros(d, d);
        for (i, g) in decay.iter().enumerate() {
            gate.row_mut(i).iter_mut().for_each(|x| *x = *g);
        }
        Some((gate, b.clone()))
    } else {
        None
    };

    inputs
        .iter()
        .map(|token| {
            let x = token.as_slice();
            if x.len() != d {
                return Err(PsmError::dim("make_layer_pairs", d, x.len()));
            }
            let k = matvec(k_proj, x)?;
            let v = matvec(v_proj, x)?;
            let pair = match cfg.kind {
                LayerKind::LinearAttention => {
                    AffinePair::new(Transition::Identity, outer(&with_normalizer(v), &k))
                }
                LayerKind::DeltaNet | LayerKind::GatedDeltaNet => {
                    let k = unit(k);
                    let beta = gate(weights.get("beta_proj")?, x)?;
                    let alpha = if cfg.kind == LayerKind::GatedDeltaNet {
                        gate(weights.get("alpha_gate")?, x)?
                    } else {
                        1.0
                    };
                    let f = outer(&v, &k).scale(beta);
                    AffinePair::new(Transition::Right(projector(&k, beta, alpha)), f)
                }
                LayerKind::RetNet => AffinePair::new(Transition::Scalar(cfg.retnet_gamma), outer(&v, &k)),
                LayerKind::Mamba2 => {
                    let g = gate(weights.get("gamma_proj")?, x)?;
                    AffinePair::new(Transition::Scalar(g), outer(&v, &k))
                }
                LayerKind::MLstm => {
                    let f = gate(weights.get("forget_proj")?, x)?;
                    let i = gate(weights.get("input_proj")?, x)?;
                    AffinePair::new(Transition::Scalar(f), outer(&with_normalizer(v), &k).scale(i))
                }
                LayerKind::GatedRfa => {
                    let g = gate(weights.get("g_proj")?, x)?;
                    AffinePair::new(Transition::Scalar(g), outer(&v, &k).scale(1.0 - g))
                }
                LayerKind::S4 => {
                    let (gate, b) = s4.as_ref().expect("prepared above");
                    let ones = vec![1.0; d];
                    AffinePair::new(Transition::Diagonal(gate.clone()), b.hadamard(&outer(&v, &ones))?)
                }
                LayerKind::Mamba => {
                    let alpha: Vec<f64> = matvec(weights.get("alpha_proj")?, x)?.into_iter().map(sigmoid).collect();
                    let ones = vec![1.0; d];
                    // e^{-α} broadcast along rows
                    let decay = outer(&alpha, &ones).exp_neg();
                    let av: Vec<f64> = alpha.iter().zip(&v).map(|(a, b)| a * b).collect();
                    AffinePair::new(Transition::Diagonal(decay), outer(&av, &k))
                }
                LayerKind::Gla => {
                    let alpha: Vec<f64> = matvec(weights.get("alpha_proj")?, x)?.into_iter().map(sigmoid).collect();
                    let ones = vec![1.0; d];
                    // 1 αᵀ: each column scaled by its gate
                    AffinePair::new(Transition::Diagonal(outer(&ones, &alpha)), outer(&v, &k))
                }
            };
            Ok(pair)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanPath {
    Static,
    Online,
}

/// States `s_0..s_{T-1}` read off the `f` component of scanned prefixes.
///
/// The static path right-pads with `(I, 0)` up to a power of two.
pub fn layer_states_via_scan(
    cfg: &LayerConfig,
    inputs: &[Vector],
    weights: &WeightBundle,
    path: ScanPath,
) -> Result<Vec<Matrix>> {
    let pairs = make_layer_pairs(cfg, inputs, weights)?;
    scan_affine_states(pairs, path)
}

/// Inclusive affine states of `pairs` via one of the scan paths.
pub fn scan_affine_states(mut pairs: Vec<AffinePair>, path: ScanPath) -> Result<Vec<Matrix>> {
    let n = pairs.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    match path {
        ScanPath::Static => {
            let (r, c) = pairs[0].f.shape();
            pairs.resize(n.next_power_of_two(), AffinePair::identity(r, c));
            let st = blelloch(&pairs, &AffineAggregator)?;
            let mut out = Vec::with_capacity(n);
            for t in 0..n {
                let pair = match st.prefixes.get(t + 1) {
                    Some(StateElement::Value(p)) => p,
                    Some(StateElement::Identity) => unreachable!("only prefix 0 is the identity"),
                    None => &st.total,
                };
                out.push(pair.f.clone());
            }
            Ok(out)
        }
        ScanPath::Online => {
            let (emitted, _) = scan_online(pairs, &AffineAggregator);
            Ok(emitted.into_iter().map(|p| p.f).collect())
        }
    }
}

/// Query readout `y = S q`; families with a normaliser row divide by
/// `max(|zᵀ q|, ε)`.
pub fn layer_readout(cfg: &LayerConfig, state: &Matrix, query: &[f64]) -> Result<Vec<f64>> {
    if state.shape() != cfg.state_shape() || query.len() != cfg.dim {
        return Err(PsmError::dim(
            "layer_readout",
            format!("{:?} state, {} query", cfg.state_shape(), cfg.dim),
            format!("{:?} state, {} query", state.shape(), query.len()),
        ));
    }
    let num: Vec<f64> = (0..cfg.dim).map(|r| dot(state.row(r), query)).collect();
    if !cfg.kind.has_normalizer() {
        return Ok(num);
    }
    let den = dot(state.row(cfg.dim), query).abs().max(NORMALIZER_EPS);
    Ok(num.into_iter().map(|v| v / den).collect())
}

/// Per-token queries `W_q x_t`.
pub fn layer_queries(cfg: &LayerConfig, inputs: &[Vector], weights: &WeightBundle) -> Result<Vec<Vec<f64>>> {
    let q = weights.get("q_proj")?;
    if q.shape() != (cfg.dim, cfg.dim) {
        return Err(PsmError::dim("q_proj", cfg.dim, q.cols()));
    }
    inputs.iter().map(|x| matvec(q, x.as_slice())).collect()
}

/// LTI pairs `g_k = (A, B x_k)` with a column-vector state and left action.
pub fn lti_pairs(a: &Matrix, b: &Matrix, xs: &[Vector]) -> Result<Vec<AffinePair>> {
    check_lti(a, b, xs)?;
    xs.iter()
        .map(|x| Ok(AffinePair::new(Transition::Left(a.clone()), matmul(b, &x.as_column())?)))
        .collect()
}

fn check_lti(a: &Matrix, b: &Matrix, xs: &[Vector]) -> Result<()> {
    if a.rows() != a.cols() {
        return Err(PsmError::dim("lti", "square A", format!("{:?}", a.shape())));
    }
    if b.rows() != a.rows() {
        return Err(PsmError::dim("lti", a.rows(), b.rows()));
    }
    if let Some(x) = xs.iter().find(|x| x.len() != b.cols()) {
        return Err(PsmError::dim("lti", b.cols(), x.len()));
    }
    Ok(())
}

/// Closed-form prefix `G_t = (A^t, Σ_{k<t} A^{t-1-k} B x_k)` of an LTI system.
pub fn lti_prefix_closed_form(a: &Matrix, b: &Matrix, xs: &[Vector], t: usize) -> Result<AffinePair> {
    check_lti(a, b, xs)?;
    if t > xs.len() {
        return Err(PsmError::dim("lti_prefix_closed_form", format!("t <= {}", xs.len()), t));
    }
    let d = a.rows();
    // powers[p] = A^p
    let mut powers = vec![Matrix::identity(d)];
    for p in 1..=t {
        let next = matmul(&powers[p - 1], a)?;
        powers.push(next);
    }
    let mut f = Matrix::zeros(d, 1);
    for (k, x) in xs.iter().enumerate().take(t) {
        let term = matmul(&powers[t - 1 - k], &matmul(b, &x.as_column())?)?;
        f = f.add(&term)?;
    }
    let e = if t == 0 {
        Transition::Identity
    } else {
        Transition::Left(powers.swap_remove(t))
    };
    Ok(AffinePair::new(e, f))
}

/// Seeded token vectors with entries uniform in `[-1, 1)`.
pub fn random_inputs(n: usize, dim: usize, seed: u64) -> Vec<Vector> {
    let m = seeded_init(n, dim, seed, 1.0);
    (0..n)
        .map(|t| Vector::new(m.row(t).to_vec()).expect("dim > 0"))
        .collect()
}
