//! Shared independent oracles for the integration and acceptance suites.
//! Everything here recomputes expected values from first principles
//! (exact integer combinatorics, literal formula evaluation) and shares
//! no code with the implementation paths it checks.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};

pub fn big_factorial(n: u64) -> BigUint {
    let mut acc = BigUint::one();
    for k in 2..=n {
        acc *= k;
    }
    acc
}

pub fn big_choose(n: u64, r: u64) -> BigUint {
    if r > n {
        return BigUint::zero();
    }
    big_factorial(n) / (big_factorial(r) * big_factorial(n - r))
}

fn big_to_f64(x: &BigUint) -> f64 {
    x.to_f64().expect("fits f64 range at test scale")
}

/// Exact conditional HWE p-value by exhaustive enumeration with integer
/// arithmetic: arrangement counts per heterozygote count share one
/// denominator, so tail membership is an exact integer comparison.
pub fn hwe_exact_oracle(n_aa: u64, n_ab: u64, n_bb: u64) -> f64 {
    let n = n_aa + n_ab + n_bb;
    assert!(n > 0);
    let minor = (2 * n_aa + n_ab).min(2 * n_bb + n_ab);
    let ways = |h: u64| -> BigUint {
        let minor_hom = (minor - h) / 2;
        let major_hom = n - h - minor_hom;
        big_factorial(n) / (big_factorial(minor_hom) * big_factorial(h) * big_factorial(major_hom))
            * BigUint::from(2u64).pow(h as u32)
    };
    let obs_ways = ways(n_ab);
    let mut tail = BigUint::zero();
    let mut total = BigUint::zero();
    let mut h = minor % 2;
    while h <= minor {
        let w = ways(h);
        if w <= obs_ways {
            tail += &w;
        }
        total += w;
        h += 2;
    }
    big_to_f64(&tail) / big_to_f64(&total)
}

/// Full conditional heterozygote distribution as exact ratios.
pub fn hwe_distribution_oracle(n_aa: u64, n_ab: u64, n_bb: u64) -> Vec<(u64, f64)> {
    let n = n_aa + n_ab + n_bb;
    let minor = (2 * n_aa + n_ab).min(2 * n_bb + n_ab);
    let mut ways = Vec::new();
    let mut total = BigUint::zero();
    let mut h = minor % 2;
    while h <= minor {
        let minor_hom = (minor - h) / 2;
        let major_hom = n - h - minor_hom;
        let w = big_factorial(n)
            / (big_factorial(minor_hom) * big_factorial(h) * big_factorial(major_hom))
            * BigUint::from(2u64).pow(h as u32);
        total += &w;
        ways.push((h, w));
        h += 2;
    }
    let total = big_to_f64(&total);
    ways.into_iter().map(|(h, w)| (h, big_to_f64(&w) / total)).collect()
}

/// Exact hypergeometric upper tail P(X >= a) by brute-force combinatorial
/// summation with big integers.
pub fn hypergeom_tail_oracle(a: u64, k: u64, n: u64, total: u64) -> f64 {
    let mut numer = BigUint::zero();
    let k_max = k.min(n);
    for x in a..=k_max {
        if n - x <= total - k {
            numer += big_choose(k, x) * big_choose(total - k, n - x);
        }
    }
    big_to_f64(&numer) / big_to_f64(&big_choose(total, n))
}

/// Fisher one-sided p as a literal nested-loop enumeration over all 2x2
/// tables with the observed margins, masses summed for a' >= a.
pub fn fisher_greater_oracle(a: u64, b: u64, c: u64, d: u64) -> f64 {
    let row1 = a + b;
    let col1 = a + c;
    let total = a + b + c + d;
    let mut tail = BigUint::zero();
    let mut all = BigUint::zero();
    for aa in 0..=row1.min(col1) {
        if col1 - aa > total - row1 {
            continue; // infeasible table with these margins
        }
        let mass = big_choose(row1, aa) * big_choose(total - row1, col1 - aa);
        if aa >= a {
            tail += &mass;
        }
        all += mass;
    }
    big_to_f64(&tail) / big_to_f64(&all)
}
