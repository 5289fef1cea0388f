//! Truncated multivariate Taylor polynomials ("jets").
//!
//! A [`Jet`] carries the Taylor coefficients of a quantity, with respect to
//! every variable of a [`JetSpace`], up to some total degree. Arithmetic and
//! the elementary functions propagate those coefficients exactly, and
//! [`Jet::partial`] differentiates a jet of degree `d` into a jet of degree
//! `d - 1`. The backstepping recursion needs derivatives of derivatives of
//! the virtual controls; evaluating it on jets of degree `r - 1` gives every
//! one of them exactly with cost linear in the recursion length.
//!
//! Coefficients are stored in graded order (all degree-0, then degree-1,
//! ...), so a jet of degree `d` is a prefix of length `space.len_up_to(d)`.

use std::collections::HashMap;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::Arc;

use crate::expr::Scalar;

#[derive(Debug)]
pub struct JetSpace {
    vars: usize,
    max_degree: usize,
    /// `prefix[d]` = number of monomials with degree `<= d`.
    prefix: Vec<usize>,
    /// Products `(i, j, k)`: monomial i times monomial j is monomial k,
    /// sorted by degree of k.
    products: Vec<(u32, u32, u32)>,
    /// `product_prefix[d]` = number of products with result degree `<= d`.
    product_prefix: Vec<usize>,
    /// `raise[m * vars + v]` = index of monomial `m * z_v`, if within range.
    raise: Vec<Option<u32>>,
    /// Exponent of variable v in monomial m, `exps[m * vars + v]`.
    exps: Vec<u8>,
}

impl JetSpace {
    pub fn new(vars: usize, max_degree: usize) -> Arc<Self> {
        // Graded enumeration of exponent vectors.
        let mut monomials: Vec<Vec<u8>> = vec![vec![0; vars]];
        let mut prefix = vec![1];
        let mut frontier: Vec<Vec<u8>> = monomials.clone();
        for _ in 1..=max_degree {
            let mut next: Vec<Vec<u8>> = Vec::new();
            for m in &frontier {
                // Only raise variables at or after the last nonzero one, so
                // each monomial is generated exactly once.
                let last = m.iter().rposition(|&e| e > 0).unwrap_or(0);
                for v in last..vars {
                    let mut n = m.clone();
                    n[v] += 1;
                    next.push(n);
                }
            }
            monomials.extend(next.iter().cloned());
            prefix.push(monomials.len());
            frontier = next;
        }

        let lookup: HashMap<&[u8], usize> = monomials
            .iter()
            .enumerate()
            .map(|(i, m)| (m.as_slice(), i))
            .collect();
        let index_of = |e: &[u8]| lookup.get(e).copied();
        let degree = |e: &[u8]| e.iter().map(|&x| x as usize).sum::<usize>();

        let mut products = Vec::new();
        for (i, a) in monomials.iter().enumerate() {
            for (j, b) in monomials.iter().enumerate() {
                if degree(a) + degree(b) > max_degree {
                    continue;
                }
                let sum: Vec<u8> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                let k = index_of(&sum).expect("product monomial within degree bound");
                products.push((i as u32, j as u32, k as u32));
            }
        }
        products.sort_by_key(|&(_, _, k)| k);
        let mut product_prefix = Vec::with_capacity(max_degree + 1);
        for d in 0..=max_degree {
            product_prefix.push(products.partition_point(|&(_, _, k)| (k as usize) < prefix[d]));
        }

        let mut raise = vec![None; monomials.len() * vars];
        let mut exps = vec![0u8; monomials.len() * vars];
        for (m, e) in monomials.iter().enumerate() {
            for v in 0..vars {
                exps[m * vars + v] = e[v];
                if degree(e) < max_degree {
                    let mut n = e.clone();
                    n[v] += 1;
                    raise[m * vars + v] = index_of(&n).map(|k| k as u32);
                }
            }
        }

        Arc::new(JetSpace {
            vars,
            max_degree,
            prefix,
            products,
            product_prefix,
            raise,
            exps,
        })
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn len_up_to(&self, degree: usize) -> usize {
        self.prefix[degree.min(self.max_degree)]
    }

    /// Index of the linear monomial `z_v`.
    fn linear(&self, v: usize) -> usize {
        1 + v
    }
}

/// Truncated Taylor expansion around the evaluation point.
#[derive(Debug, Clone)]
pub struct Jet {
    space: Arc<JetSpace>,
    degree: usize,
    coeffs: Vec<f64>,
}

impl Jet {
    pub fn constant(space: &Arc<JetSpace>, value: f64) -> Self {
        let degree = space.max_degree;
        let mut coeffs = vec![0.0; space.len_up_to(degree)];
        coeffs[0] = value;
        Jet {
            space: Arc::clone(space),
            degree,
            coeffs,
        }
    }

    /// Independent variable `v` evaluated at `value`.
    pub fn variable(space: &Arc<JetSpace>, v: usize, value: f64) -> Self {
        assert!(v < space.vars, "variable index out of range");
        let mut j = Jet::constant(space, value);
        if space.max_degree > 0 {
            j.coeffs[space.linear(v)] = 1.0;
        }
        j
    }

    pub fn value(&self) -> f64 {
        self.coeffs[0]
    }

    /// Degree up to which the coefficients are exact.
    pub fn degree(&self) -> usize {
        self.degree
    }

    /// First partial derivative at the expansion point. Requires degree >= 1.
    pub fn gradient_entry(&self, v: usize) -> f64 {
        assert!(self.degree >= 1, "jet of degree 0 carries no derivatives");
        self.coeffs[self.space.linear(v)]
    }

    /// Partial derivative with respect to `v` as a jet of one lower degree.
    pub fn partial(&self, v: usize) -> Jet {
        assert!(self.degree >= 1, "cannot differentiate a jet of degree 0");
        let degree = self.degree - 1;
        let n = self.space.vars;
        let len = self.space.len_up_to(degree);
        let mut coeffs = vec![0.0; len];
        for (m, c) in coeffs.iter_mut().enumerate() {
            if let Some(up) = self.space.raise[m * n + v] {
                let e = self.space.exps[up as usize * n + v] as f64;
                *c = e * self.coeffs[up as usize];
            }
        }
        Jet {
            space: Arc::clone(&self.space),
            degree,
            coeffs,
        }
    }

    /// Zero jet exact up to `degree`.
    pub fn zero(space: &Arc<JetSpace>, degree: usize) -> Jet {
        Jet::zero_of_degree(space, degree.min(space.max_degree))
    }

    pub fn space(&self) -> &Arc<JetSpace> {
        &self.space
    }

    /// `self += s * other`, truncated to the lower degree.
    pub fn axpy(&mut self, s: f64, other: &Jet) {
        self.truncate(other.degree);
        for (c, o) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *c += s * o;
        }
    }

    pub fn scale(mut self, s: f64) -> Jet {
        self.coeffs.iter_mut().for_each(|c| *c *= s);
        self
    }

    pub fn add_scalar(mut self, s: f64) -> Jet {
        self.coeffs[0] += s;
        self
    }

    /// `self += a * b`, truncated to the lowest degree involved.
    pub fn add_product(&mut self, a: &Jet, b: &Jet) {
        let degree = self.degree.min(a.degree).min(b.degree);
        self.truncate(degree);
        let end = self.space.product_prefix[degree];
        for &(i, j, k) in &self.space.products[..end] {
            self.coeffs[k as usize] += a.coeffs[i as usize] * b.coeffs[j as usize];
        }
    }

    fn truncate(&mut self, degree: usize) {
        if degree < self.degree {
            self.degree = degree;
            self.coeffs.truncate(self.space.len_up_to(degree));
        }
    }

    fn zero_of_degree(space: &Arc<JetSpace>, degree: usize) -> Jet {
        Jet {
            space: Arc::clone(space),
            degree,
            coeffs: vec![0.0; space.len_up_to(degree)],
        }
    }

    fn mul_ref(&self, rhs: &Jet) -> Jet {
        let degree = self.degree.min(rhs.degree);
        let mut out = Jet::zero_of_degree(&self.space, degree);
        out.add_product(self, rhs);
        out
    }

    fn add_ref(&self, rhs: &Jet, sign: f64) -> Jet {
        let degree = self.degree.min(rhs.degree);
        let len = self.space.len_up_to(degree);
        let coeffs = (0..len)
            .map(|m| self.coeffs[m] + sign * rhs.coeffs[m])
            .collect();
        Jet {
            space: Arc::clone(&self.space),
            degree,
            coeffs,
        }
    }

    /// `sum_k derivs[k] / k! * h^k` with `h = self - value`.
    fn compose(&self, derivs: &[f64]) -> Jet {
        let mut h = self.clone();
        h.coeffs[0] = 0.0;
        let mut out = Jet::zero_of_degree(&self.space, self.degree);
        out.coeffs[0] = derivs[0];
        let mut power = Jet::constant(&self.space, 1.0);
        let mut factorial = 1.0;
        for (k, d) in derivs.iter().enumerate().skip(1) {
            power = power.mul_ref(&h);
            factorial *= k as f64;
            let s = d / factorial;
            for (o, p) in out.coeffs.iter_mut().zip(&power.coeffs) {
                *o += s * p;
            }
        }
        out
    }

    fn recip(&self) -> Jet {
        let a = self.value();
        let mut derivs = Vec::with_capacity(self.degree + 1);
        // d^k/da^k (1/a) = (-1)^k k! / a^(k+1)
        let mut fact = 1.0;
        for k in 0..=self.degree {
            if k > 0 {
                fact *= k as f64;
            }
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            derivs.push(sign * fact / a.powi(k as i32 + 1));
        }
        self.compose(&derivs)
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, rhs: Jet) -> Jet {
        self.add_ref(&rhs, 1.0)
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, rhs: Jet) -> Jet {
        self.add_ref(&rhs, -1.0)
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        self.mul_ref(&rhs)
    }
}

impl<'a> Mul<&'a Jet> for &'a Jet {
    type Output = Jet;
    fn mul(self, rhs: &Jet) -> Jet {
        self.mul_ref(rhs)
    }
}

impl<'a> Add<&'a Jet> for &'a Jet {
    type Output = Jet;
    fn add(self, rhs: &Jet) -> Jet {
        self.add_ref(rhs, 1.0)
    }
}

impl<'a> Sub<&'a Jet> for &'a Jet {
    type Output = Jet;
    fn sub(self, rhs: &Jet) -> Jet {
        self.add_ref(rhs, -1.0)
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, rhs: Jet) -> Jet {
        self.mul_ref(&rhs.recip())
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Scalar for Jet {
    fn lift(&self, c: f64) -> Self {
        Jet::constant(&self.space, c)
    }

    fn value(&self) -> f64 {
        self.coeffs[0]
    }

    fn sin(&self) -> Self {
        let (s, c) = self.value().sin_cos();
        let derivs: Vec<f64> = (0..=self.degree)
            .map(|k| [s, c, -s, -c][k % 4])
            .collect();
        self.compose(&derivs)
    }

    fn cos(&self) -> Self {
        let (s, c) = self.value().sin_cos();
        let derivs: Vec<f64> = (0..=self.degree)
            .map(|k| [c, -s, -c, s][k % 4])
            .collect();
        self.compose(&derivs)
    }

    fn exp(&self) -> Self {
        let e = self.value().exp();
        self.compose(&vec![e; self.degree + 1])
    }

    fn powi(&self, n: i32) -> Self {
        if n < 0 {
            return self.recip().powi(-n);
        }
        let mut result = Jet::constant(&self.space, 1.0);
        let mut base = self.clone();
        let mut e = n as u32;
        while e > 0 {
            if e & 1 == 1 {
                result = result.mul_ref(&base);
            }
            e >>= 1;
            if e > 0 {
                base = base.mul_ref(&base);
            }
        }
        result
    }
}
