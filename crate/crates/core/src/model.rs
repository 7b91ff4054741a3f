//! Declaration of the stochastic polynomial system: the random-coefficient
//! model, the initial-state distribution, and model-file ingestion.
//!
//! The update rule is x(t+1) = sum_i F_i(t) x^[i](t) with
//! F_i(t) = C_{i,0} + sum_p w_p(t) C_{i,p}: every coefficient matrix is
//! affine in a per-step parameter vector w whose components are mutually
//! independent scalar sources, drawn fresh each step. Dependence between
//! F_i and F_j within one step is expressed by reusing the same parameter.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distribution::ScalarDistribution;
use crate::error::{Error, Result};
use crate::kron::Mat;

/// Expression grammar for initial-state components: constants, independent
/// scalar sources, sums, products, integer powers, and sin/cos of an affine
/// function of a single source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Expr {
    Const { value: f64 },
    Source { index: usize },
    Add { args: Vec<Expr> },
    Mul { args: Vec<Expr> },
    Pow { base: Box<Expr>, exp: u32 },
    Sin { source: usize, scale: f64, offset: f64 },
    Cos { source: usize, scale: f64, offset: f64 },
}

impl Expr {
    pub fn constant(v: f64) -> Self {
        Expr::Const { value: v }
    }

    pub fn source(i: usize) -> Self {
        Expr::Source { index: i }
    }

    pub fn add(args: Vec<Expr>) -> Self {
        Expr::Add { args }
    }

    pub fn mul(args: Vec<Expr>) -> Self {
        Expr::Mul { args }
    }

    pub fn sin_of(source: usize, scale: f64, offset: f64) -> Self {
        Expr::Sin { source, scale, offset }
    }

    pub fn cos_of(source: usize, scale: f64, offset: f64) -> Self {
        Expr::Cos { source, scale, offset }
    }

    fn validate(&self, num_sources: usize, depth: usize) -> Result<()> {
        if depth > 64 {
            return Err(Error::validation("expression tree too deep"));
        }
        match self {
            Expr::Const { value } => {
                if !value.is_finite() {
                    return Err(Error::validation("expression constant must be finite"));
                }
            }
            Expr::Source { index } => {
                if *index >= num_sources {
                    return Err(Error::validation(format!(
                        "expression references source {index}, only {num_sources} declared"
                    )));
                }
            }
            Expr::Add { args } | Expr::Mul { args } => {
                for a in args {
                    a.validate(num_sources, depth + 1)?;
                }
            }
            Expr::Pow { base, exp } => {
                if *exp > 64 {
                    return Err(Error::validation("power exponent above 64 is not supported"));
                }
                base.validate(num_sources, depth + 1)?;
            }
            Expr::Sin { source, scale, offset } | Expr::Cos { source, scale, offset } => {
                if *source >= num_sources {
                    return Err(Error::validation(format!(
                        "trig node references source {source}, only {num_sources} declared"
                    )));
                }
                if !(scale.is_finite() && offset.is_finite()) {
                    return Err(Error::validation("trig coefficients must be finite"));
                }
            }
        }
        Ok(())
    }

    /// Evaluates the expression at a concrete source vector.
    pub fn eval(&self, sources: &[f64]) -> f64 {
        match self {
            Expr::Const { value } => *value,
            Expr::Source { index } => sources[*index],
            Expr::Add { args } => args.iter().map(|a| a.eval(sources)).sum(),
            Expr::Mul { args } => args.iter().map(|a| a.eval(sources)).product(),
            Expr::Pow { base, exp } => base.eval(sources).powi(*exp as i32),
            Expr::Sin { source, scale, offset } => (scale * sources[*source] + offset).sin(),
            Expr::Cos { source, scale, offset } => (scale * sources[*source] + offset).cos(),
        }
    }
}

/// Independent scalar sources plus one expression per state component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialStateModel {
    pub sources: Vec<ScalarDistribution>,
    pub components: Vec<Expr>,
}

impl InitialStateModel {
    pub fn validate(&self) -> Result<()> {
        for s in &self.sources {
            s.validate()?;
        }
        if self.components.is_empty() {
            return Err(Error::validation("initial state needs at least one component"));
        }
        for c in &self.components {
            c.validate(self.sources.len(), 0)?;
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.components.len()
    }

    /// Draws a concrete initial state from per-source uniforms in [0,1).
    pub fn sample_from_uniforms(&self, uniforms: &[f64]) -> Vec<f64> {
        assert_eq!(uniforms.len(), self.sources.len());
        let values: Vec<f64> = self
            .sources
            .iter()
            .zip(uniforms)
            .map(|(d, &u)| d.sample_from_uniform(u))
            .collect();
        self.components.iter().map(|c| c.eval(&values)).collect()
    }
}

/// The random-coefficient model: F_i(t) = C_{i,0} + sum_p w_p(t) C_{i,p}.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientModel {
    n: usize,
    degree: usize,
    params: Vec<ScalarDistribution>,
    /// C_{i,0}, one n x n^i matrix per degree i = 0..=degree.
    constants: Vec<Mat>,
    /// Per degree i, the parameter-linear matrices keyed by parameter index.
    linear: Vec<BTreeMap<usize, Mat>>,
}

impl CoefficientModel {
    pub fn new(
        n: usize,
        degree: usize,
        params: Vec<ScalarDistribution>,
        constants: Vec<Mat>,
        linear: Vec<BTreeMap<usize, Mat>>,
    ) -> Result<Self> {
        let m = CoefficientModel {
            n,
            degree,
            params,
            constants,
            linear,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::validation("state dimension must be positive"));
        }
        for p in &self.params {
            p.validate()?;
        }
        if self.constants.len() != self.degree + 1 || self.linear.len() != self.degree + 1 {
            return Err(Error::validation(format!(
                "expected {} coefficient entries, got {} constant / {} linear",
                self.degree + 1,
                self.constants.len(),
                self.linear.len()
            )));
        }
        let mut any_nonzero = false;
        for i in 0..=self.degree {
            let cols = self.n.checked_pow(i as u32).ok_or_else(|| {
                Error::validation(format!("n^{i} overflows for n = {}", self.n))
            })?;
            let c = &self.constants[i];
            if c.rows() != self.n || c.cols() != cols {
                return Err(Error::ShapeMismatch {
                    degree: i,
                    expected_rows: self.n,
                    expected_cols: cols,
                    got_rows: c.rows(),
                    got_cols: c.cols(),
                });
            }
            any_nonzero |= !c.is_zero();
            for (&p, m) in &self.linear[i] {
                if p >= self.params.len() {
                    return Err(Error::validation(format!(
                        "F_{i} references parameter {p}, only {} declared",
                        self.params.len()
                    )));
                }
                if m.rows() != self.n || m.cols() != cols {
                    return Err(Error::ShapeMismatch {
                        degree: i,
                        expected_rows: self.n,
                        expected_cols: cols,
                        got_rows: m.rows(),
                        got_cols: m.cols(),
                    });
                }
                any_nonzero |= !m.is_zero();
            }
        }
        if !any_nonzero {
            return Err(Error::validation("all coefficient matrices are zero"));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Polynomial degree d_S of the system.
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn params(&self) -> &[ScalarDistribution] {
        &self.params
    }

    pub fn constant(&self, i: usize) -> &Mat {
        &self.constants[i]
    }

    pub fn linear(&self, i: usize) -> &BTreeMap<usize, Mat> {
        &self.linear[i]
    }

    /// F_i for a concrete parameter draw.
    pub fn materialize(&self, i: usize, w: &[f64]) -> Mat {
        let mut m = self.constants[i].clone();
        for (&p, lm) in &self.linear[i] {
            m.axpy(w[p], lm);
        }
        m
    }

    /// True when no coefficient depends on a parameter.
    pub fn is_deterministic(&self) -> bool {
        self.linear.iter().all(|l| l.values().all(|m| m.is_zero()))
    }

    /// Sparse triplet view used by the simulation oracle and the
    /// matrix-free propagation engine.
    pub fn compiled(&self) -> CompiledCoeffs {
        let mut per_degree = Vec::with_capacity(self.degree + 1);
        for i in 0..=self.degree {
            let consts = triplets(&self.constants[i]);
            let params: Vec<(usize, Vec<(usize, usize, f64)>)> = self.linear[i]
                .iter()
                .filter(|(_, m)| !m.is_zero())
                .map(|(&p, m)| (p, triplets(m)))
                .collect();
            per_degree.push(DegreeTriplets { consts, params });
        }
        CompiledCoeffs {
            n: self.n,
            degree: self.degree,
            num_params: self.params.len(),
            per_degree,
        }
    }
}

fn triplets(m: &Mat) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            let v = m.get(r, c);
            if v != 0.0 {
                out.push((r, c, v));
            }
        }
    }
    out
}

/// Triplet form of one degree's coefficient matrices.
#[derive(Debug, Clone)]
pub struct DegreeTriplets {
    pub consts: Vec<(usize, usize, f64)>,
    pub params: Vec<(usize, Vec<(usize, usize, f64)>)>,
}

#[derive(Debug, Clone)]
pub struct CompiledCoeffs {
    pub n: usize,
    pub degree: usize,
    pub num_params: usize,
    pub per_degree: Vec<DegreeTriplets>,
}

impl CompiledCoeffs {
    /// One simulation step: x_next = sum_i F_i(w) x^[i].
    pub fn step(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut xpow: Vec<Vec<f64>> = Vec::with_capacity(self.degree + 1);
        xpow.push(vec![1.0]);
        for i in 1..=self.degree {
            let prev = &xpow[i - 1];
            let mut cur = Vec::with_capacity(prev.len() * self.n);
            for &a in prev {
                for &b in x {
                    cur.push(a * b);
                }
            }
            xpow.push(cur);
        }
        let mut next = vec![0.0; self.n];
        for (i, deg) in self.per_degree.iter().enumerate() {
            let xp = &xpow[i];
            for &(r, c, v) in &deg.consts {
                next[r] += v * xp[c];
            }
            for (p, trips) in &deg.params {
                let wp = w[*p];
                for &(r, c, v) in trips {
                    next[r] += wp * v * xp[c];
                }
            }
        }
        next
    }
}

/// The full system: coefficients plus initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialSystemSpec {
    pub name: String,
    pub coeffs: CoefficientModel,
    pub init: InitialStateModel,
}

impl PolynomialSystemSpec {
    pub fn new(name: impl Into<String>, coeffs: CoefficientModel, init: InitialStateModel) -> Result<Self> {
        init.validate()?;
        if coeffs.n() != init.n() {
            return Err(Error::validation(format!(
                "coefficient dimension {} does not match {} initial-state components",
                coeffs.n(),
                init.n()
            )));
        }
        Ok(PolynomialSystemSpec {
            name: name.into(),
            coeffs,
            init,
        })
    }

    /// Content hash over the canonical JSON form; keys propagator caches.
    pub fn content_hash(&self) -> String {
        let file = ModelFile::from_spec(self);
        let json = serde_json::to_string(&file).expect("model serialization cannot fail");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ---------------------------------------------------------------------------
// File schema (JSON)
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct FEntryFile {
    #[serde(rename = "const")]
    constant: Vec<Vec<f64>>,
    #[serde(default)]
    linear: BTreeMap<String, Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct InitialStateFile {
    sources: Vec<ScalarDistribution>,
    components: Vec<Expr>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    name: String,
    n: usize,
    #[serde(rename = "d_S")]
    d_s: usize,
    parameters: Vec<ScalarDistribution>,
    #[serde(rename = "F")]
    f: Vec<FEntryFile>,
    initial_state: InitialStateFile,
}

impl ModelFile {
    fn from_spec(spec: &PolynomialSystemSpec) -> Self {
        let to_rows = |m: &Mat| -> Vec<Vec<f64>> {
            (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
        };
        let f = (0..=spec.coeffs.degree())
            .map(|i| FEntryFile {
                constant: to_rows(spec.coeffs.constant(i)),
                linear: spec
                    .coeffs
                    .linear(i)
                    .iter()
                    .map(|(p, m)| (p.to_string(), to_rows(m)))
                    .collect(),
            })
            .collect();
        ModelFile {
            name: spec.name.clone(),
            n: spec.coeffs.n(),
            d_s: spec.coeffs.degree(),
            parameters: spec.coeffs.params().to_vec(),
            f,
            initial_state: InitialStateFile {
                sources: spec.init.sources.clone(),
                components: spec.init.components.clone(),
            },
        }
    }

    fn into_spec(self) -> Result<PolynomialSystemSpec> {
        if self.f.len() != self.d_s + 1 {
            return Err(Error::validation(format!(
                "F must have d_S + 1 = {} entries, got {}",
                self.d_s + 1,
                self.f.len()
            )));
        }
        let mut constants = Vec::with_capacity(self.f.len());
        let mut linear = Vec::with_capacity(self.f.len());
        for (i, entry) in self.f.into_iter().enumerate() {
            constants.push(Mat::from_rows(entry.constant)?);
            let mut lm = BTreeMap::new();
            for (key, rows) in entry.linear {
                let p: usize = key.parse().map_err(|_| {
                    Error::validation(format!("linear key {key:?} in F_{i} is not a parameter index"))
                })?;
                lm.insert(p, Mat::from_rows(rows)?);
            }
            linear.push(lm);
        }
        let coeffs = CoefficientModel::new(self.n, self.d_s, self.parameters, constants, linear)?;
        let init = InitialStateModel {
            sources: self.initial_state.sources,
            components: self.initial_state.components,
        };
        PolynomialSystemSpec::new(self.name, coeffs, init)
    }
}

/// Loads and fully validates a model file.
pub fn load_model(path: impl AsRef<Path>) -> Result<PolynomialSystemSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: format!("line {}, column {}: {e}", e.line(), e.column()),
    })?;
    file.into_spec()
}

/// Writes the model in the same JSON schema `load_model` reads.
pub fn save_model(spec: &PolynomialSystemSpec, path: impl AsRef<Path>) -> Result<()> {
    let file = ModelFile::from_spec(spec);
    let json = serde_json::to_string_pretty(&file).expect("model serialization cannot fail");
    std::fs::write(path, json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builders::build_logistic_model;

    #[test]
    fn shape_mismatch_names_offender() {
        let c0 = Mat::from_rows(vec![vec![0.0]]).unwrap();
        let c1 = Mat::from_rows(vec![vec![0.0]]).unwrap();
        let c2_bad = Mat::from_rows(vec![vec![0.0, 0.0]]).unwrap(); // 1x2, expected 1x1
        let err = CoefficientModel::new(
            1,
            2,
            vec![],
            vec![c0, c1, c2_bad],
            vec![BTreeMap::new(), BTreeMap::new(), BTreeMap::new()],
        )
        .unwrap_err();
        match err {
            Error::ShapeMismatch { degree, expected_cols, got_cols, .. } => {
                assert_eq!(degree, 2);
                assert_eq!(expected_cols, 1);
                assert_eq!(got_cols, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn model_roundtrip_identical() {
        let spec = build_logistic_model(
            ScalarDistribution::uniform(0.3, 0.7),
            ScalarDistribution::truncated_gaussian(0.5, 0.1, 0.0, 1.0),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logistic.json");
        save_model(&spec, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(spec, loaded);
        assert_eq!(spec.content_hash(), loaded.content_hash());
    }

    #[test]
    fn parse_error_carries_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.json");
        std::fs::write(&path, "{\n  \"name\": \"x\",\n").unwrap();
        let err = load_model(&path).unwrap_err();
        match err {
            Error::Parse { detail, .. } => assert!(detail.contains("line"), "{detail}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn expression_validation() {
        let init = InitialStateModel {
            sources: vec![ScalarDistribution::point(1.0)],
            components: vec![Expr::source(1)],
        };
        assert!(init.validate().is_err());

        let init = InitialStateModel {
            sources: vec![ScalarDistribution::point(1.0)],
            components: vec![Expr::Pow {
                base: Box::new(Expr::source(0)),
                exp: 65,
            }],
        };
        assert!(init.validate().is_err());
    }

    #[test]
    fn compiled_step_matches_materialized() {
        let spec = build_logistic_model(
            ScalarDistribution::uniform(0.3, 0.7),
            ScalarDistribution::point(0.5),
        )
        .unwrap();
        let compiled = spec.coeffs.compiled();
        let x = [0.37];
        let w = [0.55];
        let next = compiled.step(&x, &w);
        // r x (1 - x)
        let expect = 0.55 * 0.37 * (1.0 - 0.37);
        assert!((next[0] - expect).abs() < 1e-15);
    }
}
