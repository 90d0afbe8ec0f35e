//! Blelloch prefix scan over an arbitrary binary operator, in two forms.
//!
//! * [`scan_static`] evaluates the complete binary tree in heap layout with an
//!   upsweep and a downsweep, producing exclusive prefixes.
//! * [`CounterState`] / [`scan_online`] stream the same computation through a
//!   binary counter of mini-tree roots: inserting an element merges trailing
//!   occupied slots (`carry = agg(root[k], carry)`), and emitting folds the
//!   occupied roots from the most- to the least-significant slot.
//!
//! Both forms apply the operator along the same fixed parenthesisation, so
//! online emission `t` equals static exclusive prefix `t + 1` bit for bit even
//! when the operator is not associative. The identity element never reaches
//! an [`Aggregator`]; the engine short-circuits it.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{PsmError, Result};
use crate::tensor::Matrix;

/// Largest slot index the counter may use.
pub const MAX_SLOT: usize = 63;

/// A scan value, or the engine-managed identity.
#[derive(Debug, Clone, PartialEq)]
pub enum StateElement<T> {
    Identity,
    Value(T),
}

impl<T> StateElement<T> {
    pub fn is_identity(&self) -> bool {
        matches!(self, StateElement::Identity)
    }

    pub fn value(&self) -> Option<&T> {
        match self {
            StateElement::Identity => None,
            StateElement::Value(v) => Some(v),
        }
    }

    pub fn into_value(self) -> Option<T> {
        match self {
            StateElement::Identity => None,
            StateElement::Value(v) => Some(v),
        }
    }
}

/// The scan's only model hook: a deterministic binary operator.
///
/// `combine(left, right)` receives the earlier block on the left. It is never
/// called with the identity.
pub trait Aggregator {
    type State: Clone;

    fn combine(&self, left: &Self::State, right: &Self::State) -> Self::State;

    /// Whether the operator is known to be associative. Informational only;
    /// the engine computes the same tree either way.
    fn claims_associative(&self) -> bool {
        false
    }
}

impl<A: Aggregator + ?Sized> Aggregator for &A {
    type State = A::State;

    fn combine(&self, left: &Self::State, right: &Self::State) -> Self::State {
        (**self).combine(left, right)
    }

    fn claims_associative(&self) -> bool {
        (**self).claims_associative()
    }
}

/// Adapts a closure into an [`Aggregator`].
pub struct FnAggregator<T, F> {
    f: F,
    associative: bool,
    _marker: std::marker::PhantomData<fn(&T, &T) -> T>,
}

impl<T, F: Fn(&T, &T) -> T> FnAggregator<T, F> {
    pub fn new(f: F, associative: bool) -> Self {
        Self {
            f,
            associative,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Clone, F: Fn(&T, &T) -> T> Aggregator for FnAggregator<T, F> {
    type State = T;

    fn combine(&self, left: &T, right: &T) -> T {
        (self.f)(left, right)
    }

    fn claims_associative(&self) -> bool {
        self.associative
    }
}

/// Bit-level equality used by the duality checks.
pub trait BitwiseEq {
    fn bitwise_eq(&self, other: &Self) -> bool;
}

macro_rules! int_bitwise_eq {
    ($($t:ty),*) => {$(
        impl BitwiseEq for $t {
            fn bitwise_eq(&self, other: &Self) -> bool { self == other }
        }
    )*};
}
int_bitwise_eq!(i32, i64, u32, u64, usize, (), String);

impl BitwiseEq for f64 {
    fn bitwise_eq(&self, other: &Self) -> bool {
        self.to_bits() == other.to_bits()
    }
}

impl BitwiseEq for Matrix {
    fn bitwise_eq(&self, other: &Self) -> bool {
        self.bits_eq(other)
    }
}

impl<T: BitwiseEq> BitwiseEq for StateElement<T> {
    fn bitwise_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (StateElement::Identity, StateElement::Identity) => true,
            (StateElement::Value(a), StateElement::Value(b)) => a.bitwise_eq(b),
            _ => false,
        }
    }
}

/// Combines two elements, short-circuiting the identity.
/// Returns whether the aggregator was actually called.
fn combine_elements<A: Aggregator>(
    agg: &A,
    left: &StateElement<A::State>,
    right: &A::State,
) -> (StateElement<A::State>, bool) {
    match left {
        StateElement::Identity => (StateElement::Value(right.clone()), false),
        StateElement::Value(l) => (StateElement::Value(agg.combine(l, right)), true),
    }
}

/// Output of the static tree scan.
#[derive(Debug, Clone)]
pub struct StaticScan<T> {
    /// `prefixes[i]` is the tree-parenthesised aggregate of `xs[..i]`;
    /// `prefixes[0]` is the identity.
    pub prefixes: Vec<StateElement<T>>,
    /// The root of the upsweep: the aggregate of the whole input.
    pub total: T,
    /// Aggregator calls made (identity short-circuits excluded).
    pub agg_calls: u64,
}

fn check_pow2(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(PsmError::NotPowerOfTwo(n));
    }
    Ok(())
}

/// Static Blelloch scan; `xs.len()` must be a power of two.
pub fn blelloch<A: Aggregator>(xs: &[A::State], agg: &A) -> Result<StaticScan<A::State>> {
    let n = xs.len();
    check_pow2(n)?;
    let mut calls = 0u64;

    // heap layout: node v has children 2v, 2v+1; leaves at n..2n
    let mut tree: Vec<Option<A::State>> = vec![None; 2 * n];
    for (i, x) in xs.iter().enumerate() {
        tree[n + i] = Some(x.clone());
    }
    for v in (1..n).rev() {
        let merged = agg.combine(node(&tree, 2 * v), node(&tree, 2 * v + 1));
        calls += 1;
        tree[v] = Some(merged);
    }

    let mut prefix: Vec<StateElement<A::State>> = vec![StateElement::Identity; 2 * n];
    for v in 1..n {
        let (right, called) = combine_elements(agg, &prefix[v], node(&tree, 2 * v));
        calls += called as u64;
        prefix[2 * v] = prefix[v].clone();
        prefix[2 * v + 1] = right;
    }

    let total = tree[1].take().expect("root is set");
    let prefixes = prefix.drain(n..).collect();
    Ok(StaticScan {
        prefixes,
        total,
        agg_calls: calls,
    })
}

fn node<T>(tree: &[Option<T>], v: usize) -> &T {
    tree[v].as_ref().expect("child computed before parent")
}

/// Exclusive prefixes of `xs` under the Blelloch tree parenthesisation.
pub fn scan_static<A: Aggregator>(xs: &[A::State], agg: &A) -> Result<Vec<StateElement<A::State>>> {
    blelloch(xs, agg).map(|s| s.prefixes)
}

/// [`blelloch`] with the nodes of each tree level evaluated in parallel.
/// Produces exactly the same values as the serial version.
pub fn blelloch_par<A>(xs: &[A::State], agg: &A) -> Result<StaticScan<A::State>>
where
    A: Aggregator + Sync,
    A::State: Send + Sync,
{
    let n = xs.len();
    check_pow2(n)?;
    let levels = n.trailing_zeros();

    // tree[v] for v in [2^l, 2^(l+1)) is level l
    let mut tree: Vec<Option<A::State>> = vec![None; 2 * n];
    for (i, x) in xs.iter().enumerate() {
        tree[n + i] = Some(x.clone());
    }
    for level in (0..levels).rev() {
        let (lo, hi) = (1usize << level, 1usize << (level + 1));
        let (parents, children) = tree.split_at_mut(hi);
        let merged: Vec<A::State> = (lo..hi)
            .into_par_iter()
            .map(|v| {
                let l = children[2 * v - hi].as_ref().expect("left child");
                let r = children[2 * v + 1 - hi].as_ref().expect("right child");
                agg.combine(l, r)
            })
            .collect();
        for (slot, m) in parents[lo..hi].iter_mut().zip(merged) {
            *slot = Some(m);
        }
    }
    let mut calls = (n - 1) as u64;

    let mut prefix: Vec<StateElement<A::State>> = vec![StateElement::Identity; 2 * n];
    for level in 0..levels {
        let (lo, hi) = (1usize << level, 1usize << (level + 1));
        let produced: Vec<(StateElement<A::State>, bool)> = (lo..hi)
            .into_par_iter()
            .map(|v| combine_elements(agg, &prefix[v], node(&tree, 2 * v)))
            .collect();
        for (v, (right, called)) in (lo..hi).zip(produced) {
            calls += called as u64;
            prefix[2 * v] = prefix[v].clone();
            prefix[2 * v + 1] = right;
        }
    }

    let total = tree[1].take().expect("root is set");
    let prefixes = prefix.drain(n..).collect();
    Ok(StaticScan {
        prefixes,
        total,
        agg_calls: calls,
    })
}

/// Aggregator work done while processing one element of a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ElementCost {
    pub insert_calls: u64,
    pub emit_calls: u64,
    /// Occupied root slots after the element's insert.
    pub occupied_roots: usize,
}

/// Instrumentation for online scans.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanTrace {
    pub insert_agg_calls: u64,
    pub emit_agg_calls: u64,
    pub peak_occupied_roots: usize,
    pub per_element: Vec<ElementCost>,
}

impl ScanTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn elements(&self) -> usize {
        self.per_element.len()
    }

    /// CSV with header `t,insert_calls,emit_calls,occupied_roots`, one row per
    /// element (`t` is zero-based).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,insert_calls,emit_calls,occupied_roots\n");
        for (t, e) in self.per_element.iter().enumerate() {
            let _ = writeln!(out, "{t},{},{},{}", e.insert_calls, e.emit_calls, e.occupied_roots);
        }
        out
    }
}

/// The online scan's state: one optional mini-tree root per counter bit.
#[derive(Debug, Clone)]
pub struct CounterState<T> {
    roots: Vec<Option<T>>,
    elements_seen: u64,
}

impl<T> Default for CounterState<T> {
    fn default() -> Self {
        Self {
            roots: Vec::new(),
            elements_seen: 0,
        }
    }
}

impl<T: Clone> CounterState<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn elements_seen(&self) -> u64 {
        self.elements_seen
    }

    /// Root slots, least significant first.
    pub fn roots(&self) -> &[Option<T>] {
        &self.roots
    }

    pub fn occupied(&self) -> usize {
        self.roots.iter().filter(|r| r.is_some()).count()
    }

    /// Binary-counter increment: merge trailing occupied slots into the carry
    /// in ascending order and park the carry in the first empty slot.
    pub fn insert<A>(&mut self, x: T, agg: &A, trace: &mut ScanTrace) -> Result<()>
    where
        A: Aggregator<State = T>,
    {
        let mut carry = x;
        let mut k = 0;
        let mut merges = 0u64;
        loop {
            if k > MAX_SLOT {
                return Err(PsmError::SlotOverflow(k));
            }
            if k == self.roots.len() {
                self.roots.push(None);
            }
            match self.roots[k].take() {
                Some(root) => {
                    carry = agg.combine(&root, &carry);
                    merges += 1;
                    k += 1;
                }
                None => {
                    self.roots[k] = Some(carry);
                    break;
                }
            }
        }
        self.elements_seen += 1;

        let occupied = self.occupied();
        trace.insert_agg_calls += merges;
        trace.peak_occupied_roots = trace.peak_occupied_roots.max(occupied);
        trace.per_element.push(ElementCost {
            insert_calls: merges,
            emit_calls: 0,
            occupied_roots: occupied,
        });
        Ok(())
    }

    /// Folds the occupied roots from the most to the least significant slot.
    /// Recomputed from scratch on every call.
    pub fn emit<A>(&self, agg: &A, trace: &mut ScanTrace) -> Result<T>
    where
        A: Aggregator<State = T>,
    {
        let mut acc: StateElement<T> = StateElement::Identity;
        let mut calls = 0u64;
        for root in self.roots.iter().rev().flatten() {
            let (next, called) = combine_elements(agg, &acc, root);
            calls += called as u64;
            acc = next;
        }
        let out = acc.into_value().ok_or(PsmError::EmptyCounter)?;
        trace.emit_agg_calls += calls;
        if let Some(last) = trace.per_element.last_mut() {
            last.emit_calls += calls;
        }
        Ok(out)
    }
}

/// Runs the binary-counter scan over `xs`, emitting after every insert.
/// Emission `t` is the tree aggregate of `xs[..=t]`.
pub fn scan_online<A, I>(xs: I, agg: &A) -> (Vec<A::State>, ScanTrace)
where
    A: Aggregator,
    I: IntoIterator<Item = A::State>,
{
    let mut state = CounterState::new();
    let mut trace = ScanTrace::new();
    let mut out = Vec::new();
    for x in xs {
        state
            .insert(x, agg, &mut trace)
            .expect("an in-memory stream cannot reach 2^64 elements");
        out.push(state.emit(agg, &mut trace).expect("counter is non-empty"));
    }
    (out, trace)
}

/// `⌈log₂ m⌉` for `m ≥ 1`.
pub fn ceil_log2(m: u64) -> u32 {
    assert!(m >= 1, "ceil_log2 of zero");
    64 - (m - 1).leading_zeros()
}

/// `⌊log₂ m⌋` for `m ≥ 1`.
pub fn floor_log2(m: u64) -> u32 {
    assert!(m >= 1, "floor_log2 of zero");
    63 - m.leading_zeros()
}

/// Upper bound on occupied roots after `m` elements: `⌈log₂ m⌉`, except that
/// the single root stored after the first element is allowed.
pub fn occupied_roots_bound(m: u64) -> usize {
    ceil_log2(m).max(1) as usize
}

/// Per-index comparison of the online and static scans.
#[derive(Debug, Clone)]
pub struct DualityReport {
    pub n: usize,
    /// `matches[t]`: online emission `t` is bitwise equal to static exclusive
    /// prefix `t + 1` (the upsweep root for the last element).
    pub matches: Vec<bool>,
    pub peak_occupied_roots: usize,
    /// Occupied roots stayed within [`occupied_roots_bound`] after every element.
    pub roots_within_bound: bool,
    pub insert_merges: u64,
    pub emit_combines: u64,
    pub static_agg_calls: u64,
}

impl DualityReport {
    pub fn mismatches(&self) -> usize {
        self.matches.iter().filter(|m| !**m).count()
    }

    pub fn expected_insert_merges(&self) -> u64 {
        self.n as u64 - (self.n as u64).count_ones() as u64
    }

    pub fn all_pass(&self) -> bool {
        self.mismatches() == 0
            && self.roots_within_bound
            && self.insert_merges == self.expected_insert_merges()
    }
}

/// Runs both scans and compares them element by element.
pub fn verify_duality<A>(xs: &[A::State], agg: &A) -> Result<DualityReport>
where
    A: Aggregator,
    A::State: BitwiseEq,
{
    let st = blelloch(xs, agg)?;
    let (online, trace) = scan_online(xs.iter().cloned(), agg);
    let n = xs.len();
    let matches = online
        .iter()
        .enumerate()
        .map(|(t, emitted)| match st.prefixes.get(t + 1) {
            Some(StateElement::Value(p)) => emitted.bitwise_eq(p),
            Some(StateElement::Identity) => false,
            None => emitted.bitwise_eq(&st.total),
        })
        .collect();
    let roots_within_bound = trace
        .per_element
        .iter()
        .enumerate()
        .all(|(t, e)| e.occupied_roots <= occupied_roots_bound(t as u64 + 1));
    Ok(DualityReport {
        n,
        matches,
        peak_occupied_roots: trace.peak_occupied_roots,
        roots_within_bound,
        insert_merges: trace.insert_agg_calls,
        emit_combines: trace.emit_agg_calls,
        static_agg_calls: st.agg_calls,
    })
}

/// Integer addition.
#[derive(Debug, Clone, Copy, Default)]
pub struct AddAgg;

impl Aggregator for AddAgg {
    type State = i64;

    fn combine(&self, l: &i64, r: &i64) -> i64 {
        l.wrapping_add(*r)
    }

    fn claims_associative(&self) -> bool {
        true
    }
}

/// Floating-point subtraction `left - right`; not associative.
#[derive(Debug, Clone, Copy, Default)]
pub struct SubAgg;

impl Aggregator for SubAgg {
    type State = f64;

    fn combine(&self, l: &f64, r: &f64) -> f64 {
        l - r
    }
}

/// Order-sensitive 64-bit hash mix of the two operands; not associative.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashMixAgg;

impl Aggregator for HashMixAgg {
    type State = u64;

    fn combine(&self, l: &u64, r: &u64) -> u64 {
        let mut z = l
            .rotate_left(17)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ r.wrapping_add(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Builds the parenthesised expression the operator is applied along,
/// e.g. `((x0·x1)·x2)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExprAgg;

impl Aggregator for ExprAgg {
    type State = String;

    fn combine(&self, l: &String, r: &String) -> String {
        format!("({l}·{r})")
    }
}
