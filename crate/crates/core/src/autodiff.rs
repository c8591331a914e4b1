//! Reverse-mode differentiation on a thread-local tape.
//!
//! A [`Tape`] opens a recording session on the current thread. Leaves created
//! through it are [`Var`]s; arithmetic on them appends nodes holding local
//! partials, and [`Tape::gradient`] sweeps the nodes backwards once.
//! Constants (`Var::constant`) never touch the tape, so code generic over
//! [`Real`] can mix frozen and trainable quantities freely.

use std::cell::RefCell;
use std::fmt::Debug;
use std::marker::PhantomData;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

const CONST: u32 = u32::MAX;

#[derive(Default)]
struct TapeData {
    offsets: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
    active: bool,
}

impl TapeData {
    fn clear(&mut self) {
        self.offsets.clear();
        self.parents.clear();
        self.partials.clear();
        self.offsets.push(0);
    }

    #[inline]
    fn close_node(&mut self) -> u32 {
        let id = (self.offsets.len() - 1) as u32;
        self.offsets.push(self.parents.len() as u32);
        id
    }
}

thread_local! {
    static TAPE: RefCell<TapeData> = RefCell::new(TapeData::default());
}

#[inline]
fn with_tape<R>(f: impl FnOnce(&mut TapeData) -> R) -> R {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        assert!(t.active, "recording a Var operation without an active Tape");
        f(&mut t)
    })
}

/// A scalar that is either a constant or a node on the active tape.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    idx: u32,
    val: f64,
}

impl Var {
    pub const fn constant(val: f64) -> Var {
        Var { idx: CONST, val }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.val
    }

    #[inline]
    pub fn is_constant(self) -> bool {
        self.idx == CONST
    }

    /// Same value, no gradient path.
    #[inline]
    pub fn detach(self) -> Var {
        Var::constant(self.val)
    }

    #[inline]
    fn unary(val: f64, a: Var, da: f64) -> Var {
        if a.is_constant() {
            return Var::constant(val);
        }
        with_tape(|t| {
            t.parents.push(a.idx);
            t.partials.push(da);
            Var {
                idx: t.close_node(),
                val,
            }
        })
    }

    #[inline]
    fn binary(val: f64, a: Var, da: f64, b: Var, db: f64) -> Var {
        match (a.is_constant(), b.is_constant()) {
            (true, true) => Var::constant(val),
            (false, true) => Var::unary(val, a, da),
            (true, false) => Var::unary(val, b, db),
            (false, false) => with_tape(|t| {
                t.parents.push(a.idx);
                t.partials.push(da);
                t.parents.push(b.idx);
                t.partials.push(db);
                Var {
                    idx: t.close_node(),
                    val,
                }
            }),
        }
    }
}

/// Guard for one recording session. Creating it clears the thread's tape.
pub struct Tape {
    _not_send: PhantomData<*const ()>,
}

impl Tape {
    /// # Panics
    /// If another session is already open on this thread.
    pub fn new() -> Tape {
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            assert!(!t.active, "nested Tape sessions are not supported");
            t.clear();
            t.active = true;
        });
        Tape { _not_send: PhantomData }
    }

    pub fn var(&self, val: f64) -> Var {
        with_tape(|t| Var {
            idx: t.close_node(),
            val,
        })
    }

    pub fn vars(&self, vals: &[f64]) -> Vec<Var> {
        with_tape(|t| {
            vals.iter()
                .map(|&val| Var {
                    idx: t.close_node(),
                    val,
                })
                .collect()
        })
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        with_tape(|t| t.offsets.len() - 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adjoints of every node with respect to `output`.
    pub fn gradient(&self, output: Var) -> Gradient {
        with_tape(|t| {
            let n = t.offsets.len() - 1;
            let mut adj = vec![0.0; n];
            if output.is_constant() {
                return Gradient { adj };
            }
            adj[output.idx as usize] = 1.0;
            for i in (0..=output.idx as usize).rev() {
                let g = adj[i];
                if g == 0.0 {
                    continue;
                }
                let (lo, hi) = (t.offsets[i] as usize, t.offsets[i + 1] as usize);
                for p in lo..hi {
                    adj[t.parents[p] as usize] += g * t.partials[p];
                }
            }
            Gradient { adj }
        })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        TAPE.with(|t| t.borrow_mut().active = false);
    }
}

pub struct Gradient {
    adj: Vec<f64>,
}

impl Gradient {
    pub fn wrt(&self, v: Var) -> f64 {
        if v.is_constant() {
            0.0
        } else {
            self.adj[v.idx as usize]
        }
    }

    pub fn wrt_all(&self, vs: &[Var]) -> Vec<f64> {
        vs.iter().map(|&v| self.wrt(v)).collect()
    }
}

impl Add for Var {
    type Output = Var;
    #[inline]
    fn add(self, o: Var) -> Var {
        Var::binary(self.val + o.val, self, 1.0, o, 1.0)
    }
}

impl Sub for Var {
    type Output = Var;
    #[inline]
    fn sub(self, o: Var) -> Var {
        Var::binary(self.val - o.val, self, 1.0, o, -1.0)
    }
}

impl Mul for Var {
    type Output = Var;
    #[inline]
    fn mul(self, o: Var) -> Var {
        Var::binary(self.val * o.val, self, o.val, o, self.val)
    }
}

impl Div for Var {
    type Output = Var;
    #[inline]
    fn div(self, o: Var) -> Var {
        let q = self.val / o.val;
        Var::binary(q, self, 1.0 / o.val, o, -q / o.val)
    }
}

impl Neg for Var {
    type Output = Var;
    #[inline]
    fn neg(self) -> Var {
        Var::unary(-self.val, self, -1.0)
    }
}

impl Add<f64> for Var {
    type Output = Var;
    #[inline]
    fn add(self, c: f64) -> Var {
        Var::unary(self.val + c, self, 1.0)
    }
}

impl Sub<f64> for Var {
    type Output = Var;
    #[inline]
    fn sub(self, c: f64) -> Var {
        Var::unary(self.val - c, self, 1.0)
    }
}

impl Mul<f64> for Var {
    type Output = Var;
    #[inline]
    fn mul(self, c: f64) -> Var {
        Var::unary(self.val * c, self, c)
    }
}

impl Div<f64> for Var {
    type Output = Var;
    #[inline]
    fn div(self, c: f64) -> Var {
        Var::unary(self.val / c, self, 1.0 / c)
    }
}

impl AddAssign for Var {
    #[inline]
    fn add_assign(&mut self, o: Var) {
        *self = *self + o;
    }
}

/// Scalar arithmetic shared by plain `f64` and taped [`Var`].
pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn softplus(self) -> Self;
    fn relu(self) -> Self;
    /// `b + Σ w_i x_i` as a single node.
    fn affine(w: &[Self], x: &[Self], b: Self) -> Self;
    fn sum(xs: &[Self]) -> Self;

    #[inline]
    fn square(self) -> Self {
        self * self
    }

    #[inline]
    fn recip(self) -> Self {
        Self::cst(1.0) / self
    }

    /// Larger by value; the gradient follows the selected operand.
    #[inline]
    fn max_of(self, o: Self) -> Self {
        if self.val() >= o.val() {
            self
        } else {
            o
        }
    }

    #[inline]
    fn min_of(self, o: Self) -> Self {
        if self.val() <= o.val() {
            self
        } else {
            o
        }
    }

    /// `ln(e^a + e^b)` without overflow.
    #[inline]
    fn ln_add_exp(self, o: Self) -> Self {
        let m = self.max_of(o).val();
        ((self - m).exp() + (o - m).exp()).ln() + m
    }
}

#[inline]
fn softplus_f64(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> f64 {
        v
    }
    #[inline]
    fn val(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    #[inline]
    fn abs(self) -> f64 {
        f64::abs(self)
    }
    #[inline]
    fn softplus(self) -> f64 {
        softplus_f64(self)
    }
    #[inline]
    fn relu(self) -> f64 {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    #[inline]
    fn affine(w: &[f64], x: &[f64], b: f64) -> f64 {
        debug_assert_eq!(w.len(), x.len());
        w.iter().zip(x).fold(b, |acc, (wi, xi)| acc + wi * xi)
    }
    #[inline]
    fn sum(xs: &[f64]) -> f64 {
        xs.iter().sum()
    }
}

impl Real for Var {
    #[inline]
    fn cst(v: f64) -> Var {
        Var::constant(v)
    }
    #[inline]
    fn val(self) -> f64 {
        self.val
    }
    #[inline]
    fn exp(self) -> Var {
        let e = self.val.exp();
        Var::unary(e, self, e)
    }
    #[inline]
    fn ln(self) -> Var {
        Var::unary(self.val.ln(), self, 1.0 / self.val)
    }
    #[inline]
    fn sqrt(self) -> Var {
        let s = self.val.sqrt();
        Var::unary(s, self, 0.5 / s)
    }
    #[inline]
    fn abs(self) -> Var {
        let d = if self.val >= 0.0 { 1.0 } else { -1.0 };
        Var::unary(self.val.abs(), self, d)
    }
    #[inline]
    fn softplus(self) -> Var {
        Var::unary(softplus_f64(self.val), self, sigmoid_f64(self.val))
    }
    #[inline]
    fn relu(self) -> Var {
        if self.val > 0.0 {
            self
        } else {
            Var::constant(0.0)
        }
    }

    fn affine(w: &[Var], x: &[Var], b: Var) -> Var {
        debug_assert_eq!(w.len(), x.len());
        let val = w.iter().zip(x).fold(b.val, |acc, (wi, xi)| acc + wi.val * xi.val);
        let any_var = !b.is_constant() || w.iter().any(|v| !v.is_constant()) || x.iter().any(|v| !v.is_constant());
        if !any_var {
            return Var::constant(val);
        }
        with_tape(|t| {
            if !b.is_constant() {
                t.parents.push(b.idx);
                t.partials.push(1.0);
            }
            for (wi, xi) in w.iter().zip(x) {
                if !wi.is_constant() {
                    t.parents.push(wi.idx);
                    t.partials.push(xi.val);
                }
                if !xi.is_constant() {
                    t.parents.push(xi.idx);
                    t.partials.push(wi.val);
                }
            }
            Var {
                idx: t.close_node(),
                val,
            }
        })
    }

    fn sum(xs: &[Var]) -> Var {
        let val = xs.iter().map(|v| v.val).sum();
        if xs.iter().all(|v| v.is_constant()) {
            return Var::constant(val);
        }
        with_tape(|t| {
            for v in xs.iter().filter(|v| !v.is_constant()) {
                t.parents.push(v.idx);
                t.partials.push(1.0);
            }
            Var {
                idx: t.close_node(),
                val,
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
        let h = 1e-6 * (1.0 + x[i].abs());
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    fn mixed<T: Real>(p: &[T]) -> T {
        let (a, b, c) = (p[0], p[1], p[2]);
        let s = T::affine(&[a, b], &[b, c], c * 0.5);
        (a * b).exp() / (c.square() + 1.0) + s.softplus() - (b - a).abs().sqrt()
            + T::sum(&[a, b, c]).ln()
            + a.ln_add_exp(c * 2.0)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let x = [0.3, 0.7, 1.9];
        let tape = Tape::new();
        let vars = tape.vars(&x);
        let out = mixed(&vars);
        assert_relative_eq!(out.value(), mixed(&x[..]), epsilon = 1e-14);
        let grad = tape.gradient(out).wrt_all(&vars);
        for (i, &g) in grad.iter().enumerate() {
            let fd = central_diff(mixed, &x, i);
            assert_relative_eq!(g, fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn constants_do_not_record() {
        let tape = Tape::new();
        let c = Var::constant(2.0);
        let y = (c * 3.0).exp() + c;
        assert!(y.is_constant());
        assert_eq!(tape.len(), 0);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let tape = Tape::new();
        let x = tape.var(1.5);
        let y = x * x * x;
        assert_relative_eq!(tape.gradient(y).wrt(x), 3.0 * 1.5 * 1.5);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let y = x * x.detach();
        assert_relative_eq!(tape.gradient(y).wrt(x), 2.0);
    }

    #[test]
    #[should_panic(expected = "nested")]
    fn nested_session_panics() {
        let _a = Tape::new();
        let _b = Tape::new();
    }

    #[test]
    fn sessions_are_reusable() {
        for k in 1..4 {
            let tape = Tape::new();
            let x = tape.var(k as f64);
            let y = x * x;
            assert_relative_eq!(tape.gradient(y).wrt(x), 2.0 * k as f64);
        }
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_relative_eq!(Real::softplus(800.0_f64), 800.0);
        assert!(Real::softplus(-800.0_f64) >= 0.0);
        let tape = Tape::new();
        let x = tape.var(-50.0);
        let g = tape.gradient(x.softplus()).wrt(x);
        assert!(g > 0.0 && g < 1e-20);
    }
}
