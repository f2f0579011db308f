use std::fmt::{Debug, Display};

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2, IxDyn, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Floating-point element type of a model. Training runs in `f32`; the
/// gradient check instantiates the same code in `f64`.
pub trait Scalar:
    ndarray::LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite constant")
    }

    /// `xs[i] = exp(xs[i] - shift)` for `xs[i] <= shift`; returns the sum.
    fn exp_shifted(xs: &mut [Self], shift: Self) -> Self {
        let mut sum = Self::zero();
        for v in xs.iter_mut() {
            *v = (*v - shift).exp();
            sum += *v;
        }
        sum
    }
}

impl Scalar for f32 {
    // Polynomial exp in lanes of 16 so the loop vectorises; within a couple
    // of ulp of `f32::exp` on (-inf, 0].
    fn exp_shifted(xs: &mut [f32], shift: f32) -> f32 {
        const LANES: usize = 16;
        let mut acc = [0f32; LANES];
        let mut chunks = xs.chunks_exact_mut(LANES);
        for c in &mut chunks {
            for (v, a) in c.iter_mut().zip(acc.iter_mut()) {
                *v = exp_nonpositive(*v - shift);
                *a += *v;
            }
        }
        let mut tail = 0f32;
        for v in chunks.into_remainder() {
            *v = exp_nonpositive(*v - shift);
            tail += *v;
        }
        acc.iter().sum::<f32>() + tail
    }
}

impl Scalar for f64 {}

#[inline(always)]
fn exp_nonpositive(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // Adding 1.5 * 2^23 rounds to an integer held in the low mantissa bits.
    const ROUND: f32 = 12_582_912.0;
    let x = x.max(-87.0);
    let t = x * LOG2E + ROUND;
    let k = t.to_bits().wrapping_sub(ROUND.to_bits()) as i32;
    let n = t - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    p = p * r * r + r + 1.0;
    p * f32::from_bits(((k + 127) as u32) << 23)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: ArrayD<F>,
    /// Whether decoupled weight decay applies (not for biases or norms).
    pub decay: bool,
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, F> {
        self.params[id.0].value.view().into_dimensionality::<Ix2>().expect("rank-2 parameter")
    }

    pub fn vec(&self, id: ParamId) -> ArrayView1<'_, F> {
        self.params[id.0].value.view().into_dimensionality::<Ix1>().expect("rank-1 parameter")
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.mapv(|v| G::of(v.to_f64().unwrap())),
                    decay: p.decay,
                })
                .collect(),
        }
    }
}

/// Gradient buffers shaped like a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub(crate) tensors: Vec<ArrayD<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Gradients {
            tensors: store.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
        }
    }

    pub fn tensor(&self, id: ParamId) -> &ArrayD<F> {
        &self.tensors[id.0]
    }

    pub fn by_index(&self, i: usize) -> &ArrayD<F> {
        &self.tensors[i]
    }

    pub fn mat_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, F> {
        self.tensors[id.0].view_mut().into_dimensionality::<Ix2>().expect("rank-2 gradient")
    }

    pub fn vec_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, F> {
        self.tensors[id.0].view_mut().into_dimensionality::<Ix1>().expect("rank-1 gradient")
    }

    pub fn scale(&mut self, s: F) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * s);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(F::zero());
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| {
                let x = v.to_f64().unwrap();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }
}

pub(crate) fn zeros<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}
