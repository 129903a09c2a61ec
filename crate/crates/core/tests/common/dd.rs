//! Double-double arithmetic, enough for `exp` and `expm1` oracles with
//! roughly 30 significant digits.

#![allow(dead_code)]

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub fn from(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    /// `a - b` without rounding.
    pub fn diff(a: f64, b: f64) -> Self {
        let (hi, lo) = two_sum(a, -b);
        Self { hi, lo }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn add(self, o: Self) -> Self {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Self { hi, lo }
    }

    pub fn neg(self) -> Self {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn sub(self, o: Self) -> Self {
        self.add(o.neg())
    }

    pub fn mul(self, o: Self) -> Self {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Self { hi, lo }
    }

    pub fn div(self, o: Self) -> Self {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Self::from(q1)));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul(Self::from(q2)));
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Self { hi, lo }.add(Self::from(q3))
    }

    pub fn scale(self, k: i32) -> Self {
        let f = 2f64.powi(k);
        Self {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }
}

/// `sum_{n >= 1} x^n / n!` for `|x| <= 1/2`.
fn expm1_series(x: Dd) -> Dd {
    let mut term = x;
    let mut sum = x;
    for n in 2..40 {
        term = term.mul(x).div(Dd::from(n as f64));
        sum = sum.add(term);
        if term.hi.abs() < 1e-36 * sum.hi.abs().max(1e-300) {
            break;
        }
    }
    sum
}

pub fn exp(x: Dd) -> Dd {
    let k = (x.hi / LN2.hi).round();
    let r = x.sub(LN2.mul(Dd::from(k)));
    // exp(r) = (1 + expm1(r / 2^8))^(2^8)
    let small = r.scale(-8);
    let mut e = Dd::from(1.0).add(expm1_series(small));
    for _ in 0..8 {
        e = e.mul(e);
    }
    e.scale(k as i32)
}

pub fn expm1(x: Dd) -> Dd {
    if x.hi.abs() <= 0.5 {
        expm1_series(x)
    } else {
        exp(x).sub(Dd::from(1.0))
    }
}
