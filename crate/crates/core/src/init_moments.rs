//! Kronecker moments of the initial state: E[x0^[j]] and the norm table
//! feeding the error-bound refinements.
//!
//! Every entry of E[x0^[j]] is the expectation of a product of component
//! expressions. Components are expanded once into a sum-of-terms normal
//! form (coefficient times per-source factor bundles); independence across
//! sources then factorizes each term into one-dimensional expectations,
//! evaluated in closed form where possible and by Gauss-type quadrature
//! with node-count doubling otherwise. Entries that share an exponent
//! multiset are computed once and broadcast.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use itertools::Itertools;

use crate::distribution::{raw_moment, ScalarDistribution};
use crate::error::{Error, Result};
use crate::kron::check_size;
use crate::model::{Expr, InitialStateModel};
use crate::quad;

/// One trigonometric factor sin/cos(scale * s + offset), keyed by bit
/// patterns so bundles can be hashed and deduplicated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct TrigAtom {
    sin: bool,
    scale_bits: u64,
    offset_bits: u64,
}

impl TrigAtom {
    fn eval(&self, x: f64) -> f64 {
        let arg = f64::from_bits(self.scale_bits) * x + f64::from_bits(self.offset_bits);
        if self.sin {
            arg.sin()
        } else {
            arg.cos()
        }
    }
}

/// Product of factors attached to a single source: s^pow times trig powers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
struct Bundle {
    pow: u32,
    trig: Vec<(TrigAtom, u32)>,
}

impl Bundle {
    fn merge(&mut self, other: &Bundle) {
        self.pow += other.pow;
        for (atom, p) in &other.trig {
            match self.trig.iter_mut().find(|(a, _)| a == atom) {
                Some((_, q)) => *q += p,
                None => self.trig.push((*atom, *p)),
            }
        }
        self.trig.sort_unstable_by_key(|(a, _)| *a);
    }

    fn eval(&self, x: f64) -> f64 {
        let mut v = x.powi(self.pow as i32);
        for (atom, p) in &self.trig {
            v *= atom.eval(x).powi(*p as i32);
        }
        v
    }
}

/// coeff * prod_p bundle_p(s_p)
#[derive(Debug, Clone)]
struct Term {
    coeff: f64,
    factors: BTreeMap<usize, Bundle>,
}

impl Term {
    fn unit() -> Self {
        Term {
            coeff: 1.0,
            factors: BTreeMap::new(),
        }
    }

    fn product(&self, other: &Term) -> Term {
        let mut out = self.clone();
        out.coeff *= other.coeff;
        for (src, b) in &other.factors {
            out.factors.entry(*src).or_default().merge(b);
        }
        out
    }
}

fn expand(expr: &Expr) -> Vec<Term> {
    match expr {
        Expr::Const { value } => vec![Term {
            coeff: *value,
            factors: BTreeMap::new(),
        }],
        Expr::Source { index } => {
            let mut f = BTreeMap::new();
            f.insert(
                *index,
                Bundle {
                    pow: 1,
                    trig: vec![],
                },
            );
            vec![Term { coeff: 1.0, factors: f }]
        }
        Expr::Add { args } => args.iter().flat_map(expand).collect(),
        Expr::Mul { args } => {
            let mut acc = vec![Term::unit()];
            for a in args {
                let rhs = expand(a);
                acc = acc
                    .iter()
                    .flat_map(|t| rhs.iter().map(move |r| t.product(r)))
                    .collect();
            }
            acc
        }
        Expr::Pow { base, exp } => {
            let b = expand(base);
            let mut acc = vec![Term::unit()];
            for _ in 0..*exp {
                acc = acc
                    .iter()
                    .flat_map(|t| b.iter().map(move |r| t.product(r)))
                    .collect();
            }
            acc
        }
        Expr::Sin { source, scale, offset } | Expr::Cos { source, scale, offset } => {
            let atom = TrigAtom {
                sin: matches!(expr, Expr::Sin { .. }),
                scale_bits: scale.to_bits(),
                offset_bits: offset.to_bits(),
            };
            let mut f = BTreeMap::new();
            f.insert(
                *source,
                Bundle {
                    pow: 0,
                    trig: vec![(atom, 1)],
                },
            );
            vec![Term { coeff: 1.0, factors: f }]
        }
    }
}

/// Moment engine for one initial-state model. Immutable input, internally
/// synchronized memoization; safe to share across threads.
pub struct InitialMomentEngine {
    init: InitialStateModel,
    comp_terms: Vec<Vec<Term>>,
    bundle_cache: Mutex<HashMap<(usize, Bundle), f64>>,
    multiset_cache: Mutex<HashMap<Vec<u8>, f64>>,
}

impl InitialMomentEngine {
    pub fn new(init: &InitialStateModel) -> Result<Self> {
        init.validate()?;
        if init.components.len() > u8::MAX as usize {
            return Err(Error::Unsupported(
                "more than 255 state components are not supported".into(),
            ));
        }
        let comp_terms = init.components.iter().map(expand).collect();
        Ok(InitialMomentEngine {
            init: init.clone(),
            comp_terms,
            bundle_cache: Mutex::new(HashMap::new()),
            multiset_cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn init(&self) -> &InitialStateModel {
        &self.init
    }

    pub fn n(&self) -> usize {
        self.init.components.len()
    }

    /// E[prod over sorted component multiset of x0_c], memoized per multiset.
    fn multiset_moment(&self, multiset: &[u8]) -> Result<f64> {
        if let Some(&v) = self.multiset_cache.lock().unwrap().get(multiset) {
            return Ok(v);
        }
        let mut terms = vec![Term::unit()];
        for &c in multiset {
            let rhs = &self.comp_terms[c as usize];
            terms = terms
                .iter()
                .flat_map(|t| rhs.iter().map(move |r| t.product(r)))
                .collect();
        }
        let mut total = 0.0;
        for t in &terms {
            let mut v = t.coeff;
            for (src, bundle) in &t.factors {
                if v == 0.0 {
                    break;
                }
                v *= self.bundle_expectation(*src, bundle)?;
            }
            total += v;
        }
        self.multiset_cache
            .lock()
            .unwrap()
            .insert(multiset.to_vec(), total);
        Ok(total)
    }

    /// One-dimensional expectation E[bundle(s)] for source `src`.
    fn bundle_expectation(&self, src: usize, bundle: &Bundle) -> Result<f64> {
        if bundle.pow == 0 && bundle.trig.is_empty() {
            return Ok(1.0);
        }
        let key = (src, bundle.clone());
        if let Some(&v) = self.bundle_cache.lock().unwrap().get(&key) {
            return Ok(v);
        }
        let dist = &self.init.sources[src];
        let v = if bundle.trig.is_empty() {
            raw_moment(dist, bundle.pow)?
        } else {
            expect_with_trig(dist, bundle)?
        };
        self.bundle_cache.lock().unwrap().insert(key, v);
        Ok(v)
    }

    /// E[x0^[j]] as a dense vector of length n^j.
    pub fn kron_moment(&self, j: usize) -> Result<Vec<f64>> {
        let n = self.n();
        let len = n.checked_pow(j as u32).ok_or_else(|| Error::SizeLimit {
            required: u128::MAX,
            allowed: crate::kron::size_limit() as u128,
            context: format!("initial moment block {j}"),
        })?;
        check_size(len, 1, &format!("initial moment block {j}"))?;
        let mut out = vec![0.0; len];
        let mut digits = vec![0u8; j];
        let mut sorted: Vec<u8> = Vec::with_capacity(j);
        for (idx, slot) in out.iter_mut().enumerate() {
            let mut rem = idx;
            for d in (0..j).rev() {
                digits[d] = (rem % n) as u8;
                rem /= n;
            }
            sorted.clear();
            sorted.extend_from_slice(&digits);
            sorted.sort_unstable();
            *slot = self.multiset_moment(&sorted)?;
        }
        Ok(out)
    }

    /// ||E[x0^[j]]|| for j = 0..=j_max, without materializing the vectors:
    /// the squared norm is a multiplicity-weighted sum over exponent
    /// multisets. No monotonicity in j is assumed anywhere.
    pub fn moment_norm_table(&self, j_max: usize) -> Result<Vec<f64>> {
        let n = self.n();
        let mut table = Vec::with_capacity(j_max + 1);
        for j in 0..=j_max {
            let mut sq = 0.0f64;
            for combo in (0..n as u8).combinations_with_replacement(j) {
                let v = self.multiset_moment(&combo)?;
                sq += multiset_position_count(&combo, j) * v * v;
            }
            table.push(sq.sqrt());
        }
        Ok(table)
    }
}

/// Number of index tuples of length j whose sorted form equals `multiset`:
/// the multinomial j! / prod_c (count_c!).
fn multiset_position_count(multiset: &[u8], j: usize) -> f64 {
    let mut counts: HashMap<u8, u64> = HashMap::new();
    for &c in multiset {
        *counts.entry(c).or_insert(0) += 1;
    }
    let mut v = 1.0f64;
    let mut used = 0u64;
    for (_, c) in counts {
        for i in 1..=c {
            used += 1;
            v *= used as f64 / i as f64;
        }
    }
    debug_assert_eq!(used as usize, j);
    v
}

fn expect_with_trig(dist: &ScalarDistribution, bundle: &Bundle) -> Result<f64> {
    let f = |x: f64| bundle.eval(x);
    match dist {
        ScalarDistribution::Point { value } => Ok(f(*value)),
        ScalarDistribution::Finite { values, probabilities } => Ok(values
            .iter()
            .zip(probabilities)
            .map(|(v, p)| p * f(*v))
            .sum()),
        ScalarDistribution::Gaussian { mean, stddev } => {
            let start = bundle.pow as usize / 2 + 8;
            quad::converge_doubling(
                |nodes| quad::gaussian_expectation(f, *mean, *stddev, nodes),
                start,
                1e-10,
                "gaussian trig expectation",
            )
        }
        ScalarDistribution::Uniform { lo, hi } => {
            let start = bundle.pow as usize / 2 + 8;
            quad::converge_doubling(
                |nodes| quad::integrate_legendre(f, *lo, *hi, nodes) / (hi - lo),
                start,
                1e-10,
                "uniform trig expectation",
            )
        }
        ScalarDistribution::TruncatedGaussian { mean, stddev, lo, hi } => {
            use statrs::distribution::ContinuousCDF;
            let normal = statrs::distribution::Normal::new(*mean, *stddev)
                .map_err(|e| Error::validation(e.to_string()))?;
            let z = normal.cdf(*hi) - normal.cdf(*lo);
            let pdf = |x: f64| {
                let t = (x - mean) / stddev;
                (-0.5 * t * t).exp() / (stddev * (2.0 * std::f64::consts::PI).sqrt())
            };
            let start = bundle.pow as usize / 2 + 8;
            let raw = quad::converge_doubling(
                |nodes| quad::integrate_legendre(|x| f(x) * pdf(x), *lo, *hi, nodes),
                start,
                1e-10,
                "truncated gaussian trig expectation",
            )?;
            Ok(raw / z)
        }
    }
}
