//! Receding-horizon replay for vehicle-style models: at every step the true
//! state is measured with known noise, the moments of the current state are
//! rebuilt from the measurement and the noise distributions, and the
//! truncated system predicts means and safety radii several steps ahead.
//! No control feedback: this is an offline trace.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use momentprop::error::Error as MError;
use momentprop::init_moments::InitialMomentEngine;
use momentprop::model::{Expr, InitialStateModel, PolynomialSystemSpec};
use momentprop::oracle::empirical_moments;
use momentprop::propagate::{extract_moment, init_state, TruncatedPropagator};
use momentprop::tail::safety_radius;
use momentprop::{load_model, ScalarDistribution};

use crate::csvio::{fmt, CsvWriter};

/// Measured components: X, Y, psi, v. The heading auxiliaries c, s are
/// reconstructed from the psi measurement.
const MEASURED: usize = 4;
const PSI: usize = 2;
const C: usize = 4;
const S: usize = 5;

fn u01(rng: &mut ChaCha12Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn load_noise(path: &Path) -> Result<Vec<ScalarDistribution>, MError> {
    let text = std::fs::read_to_string(path).map_err(|e| MError::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let dists: Vec<ScalarDistribution> =
        serde_json::from_str(&text).map_err(|e| MError::Parse {
            path: path.display().to_string(),
            detail: format!("line {}, column {}: {e}", e.line(), e.column()),
        })?;
    if dists.len() != MEASURED {
        return Err(MError::validation(format!(
            "noise spec needs {MEASURED} distributions (X, Y, psi, v), got {}",
            dists.len()
        )));
    }
    for d in &dists {
        d.validate()?;
    }
    Ok(dists)
}

/// The state distribution conditioned on a noisy measurement: component i
/// is measurement_i minus a fresh noise draw, and the heading auxiliaries
/// are cos/sin of the reconstructed psi plus the slip angle.
fn conditioned_init(
    measurement: &[f64],
    noise: &[ScalarDistribution],
    beta: f64,
) -> InitialStateModel {
    let minus_noise = |i: usize| {
        Expr::add(vec![
            Expr::constant(measurement[i]),
            Expr::mul(vec![Expr::constant(-1.0), Expr::source(i)]),
        ])
    };
    InitialStateModel {
        sources: noise.to_vec(),
        components: vec![
            minus_noise(0),
            minus_noise(1),
            minus_noise(PSI),
            minus_noise(3),
            Expr::cos_of(PSI, -1.0, measurement[PSI] + beta),
            Expr::sin_of(PSI, -1.0, measurement[PSI] + beta),
        ],
    }
}

#[allow(clippy::too_many_arguments)]
pub fn run(
    model: &Path,
    nt: usize,
    horizon: usize,
    steps: usize,
    noise_path: &Path,
    beta: f64,
    pmax: f64,
    mc: Option<usize>,
    seed: u64,
    out: &Path,
    cache: Option<&Path>,
) -> Result<(), MError> {
    let spec = load_model(model)?;
    let n = spec.coeffs.n();
    if n != 6 {
        return Err(MError::validation(
            "replay expects a six-state vehicle-style model [X, Y, psi, v, c, s]",
        ));
    }
    if nt < 2 {
        return Err(MError::validation("replay needs N_T >= 2 for safety radii"));
    }
    let noise = load_noise(noise_path)?;
    let prop = TruncatedPropagator::build(&spec, nt, cache)?;
    let compiled = spec.coeffs.compiled();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // Ground truth starts from a draw of the model's own initial state.
    let uniforms: Vec<f64> = (0..spec.init.sources.len()).map(|_| u01(&mut rng)).collect();
    let mut truth = spec.init.sample_from_uniforms(&uniforms);

    let mut w = CsvWriter::create(out, &["step", "lookahead", "kind", "index", "value"])?;
    for step in 0..steps {
        for (i, v) in truth.iter().enumerate() {
            w.row(&[step.to_string(), "0".into(), "truth".into(), i.to_string(), fmt(*v)])?;
        }

        // Measure X, Y, psi, v with additive noise.
        let mut measurement = truth.clone();
        for i in 0..MEASURED {
            measurement[i] += noise[i].sample_from_uniform(u01(&mut rng));
        }
        measurement[C] = (measurement[PSI] + beta).cos();
        measurement[S] = (measurement[PSI] + beta).sin();
        for (i, v) in measurement.iter().enumerate().take(MEASURED) {
            w.row(&[step.to_string(), "0".into(), "meas".into(), i.to_string(), fmt(*v)])?;
        }

        // Condition on the measurement and predict ahead.
        let init = conditioned_init(&measurement, &noise, beta);
        let eng = InitialMomentEngine::new(&init)?;
        let states = prop.propagate(init_state(&eng, nt)?, horizon)?;
        let conditioned_spec = if mc.is_some() {
            Some(PolynomialSystemSpec::new(
                format!("{}-conditioned", spec.name),
                spec.coeffs.clone(),
                init.clone(),
            )?)
        } else {
            None
        };

        for (h, state) in states.iter().enumerate() {
            let x1 = extract_moment(state, 1)?.to_vec();
            for (i, v) in x1.iter().enumerate() {
                w.row(&[
                    step.to_string(),
                    h.to_string(),
                    "pred".into(),
                    i.to_string(),
                    fmt(*v),
                ])?;
            }
            let x2 = extract_moment(state, 2)?;
            let x2_diag: Vec<f64> = (0..n).map(|i| x2[i * n + i]).collect();
            let zeros = vec![0.0; n];
            let radius = safety_radius(&x1, &x2_diag, 0.0, &zeros, &zeros, pmax)?;
            w.row(&[
                step.to_string(),
                h.to_string(),
                "radius".into(),
                "0".into(),
                fmt(radius),
            ])?;

            if let (Some(samples), Some(cspec)) = (mc, conditioned_spec.as_ref()) {
                let em =
                    empirical_moments(cspec, 1, h, samples, seed ^ ((step as u64) << 8) ^ h as u64)?;
                let dist = x1
                    .iter()
                    .zip(&em.mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                w.row(&[
                    step.to_string(),
                    h.to_string(),
                    "mc_dist".into(),
                    "0".into(),
                    fmt(dist),
                ])?;
            }
        }

        // Advance the truth with a fresh parameter draw.
        let params: Vec<f64> = spec
            .coeffs
            .params()
            .iter()
            .map(|d| d.sample_from_uniform(u01(&mut rng)))
            .collect();
        truth = compiled.step(&truth, &params);
        if truth.iter().any(|v| !v.is_finite()) {
            w.row(&[step.to_string(), "0".into(), "status".into(), "divergence".into(), String::new()])?;
            w.finish()?;
            return Err(MError::Divergence { step: step + 1 });
        }
    }
    w.finish()?;
    println!("wrote {}", out.display());
    Ok(())
}
