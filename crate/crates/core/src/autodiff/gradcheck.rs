//! Central-difference gradient verification for any tape-built graph.

use super::nn::ParamSet;
use super::tape::{NodeId, Tape};
use super::NnError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// e = |analytic - numeric| / max(1, |analytic|, |numeric|) must stay below this.
    pub tolerance: f64,
    /// Elements checked per tensor (seeded subsample; 0 = all).
    pub max_checks_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-6,
            max_checks_per_tensor: 64,
            seed: 0x9e37,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat element index of the worst error.
    pub worst: Option<(String, usize)>,
    pub checks: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares tape gradients against central finite differences on a seeded
/// subsample of elements. The builder must be deterministic: it is re-run
/// for every probe.
pub fn gradcheck<F>(
    inputs: &ParamSet,
    build: F,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport, NnError>
where
    F: Fn(&mut Tape, &BTreeMap<String, NodeId>) -> Result<NodeId, NnError>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let ids = inputs.attach(&mut tape);
    let loss = build(&mut tape, &ids)?;
    let loss_value = tape.scalar_value(loss);
    if !loss_value.is_finite() {
        return Err(NnError::NonFinite(format!("gradcheck loss = {loss_value}")));
    }
    if let Some(p) = tape.poisoned() {
        return Err(NnError::NonFinite(format!("gradcheck forward: {p}")));
    }
    let grads = tape.backward(loss)?;

    let eval = |probe: &ParamSet| -> Result<f64, NnError> {
        let mut tape = Tape::new();
        let ids = probe.attach_frozen(&mut tape);
        let loss = build(&mut tape, &ids)?;
        let v = tape.scalar_value(loss);
        if !v.is_finite() {
            return Err(NnError::NonFinite("gradcheck probe loss".into()));
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    let mut checks = 0usize;
    for (name, value) in inputs.iter() {
        let n = value.len();
        let mut indices: Vec<usize> = (0..n).collect();
        if cfg.max_checks_per_tensor > 0 && n > cfg.max_checks_per_tensor {
            indices.shuffle(&mut rng);
            indices.truncate(cfg.max_checks_per_tensor);
            indices.sort_unstable();
        }
        let analytic = grads
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.clone()))?;
        let analytic_flat: Vec<f64> = analytic.iter().copied().collect();
        for idx in indices {
            let mut probe = inputs.clone();
            {
                let t = probe.get_mut(name)?;
                let flat = t.as_slice_mut().expect("standard layout");
                flat[idx] += cfg.step;
            }
            let f_plus = eval(&probe)?;
            {
                let t = probe.get_mut(name)?;
                let flat = t.as_slice_mut().expect("standard layout");
                flat[idx] -= 2.0 * cfg.step;
            }
            let f_minus = eval(&probe)?;
            let numeric = (f_plus - f_minus) / (2.0 * cfg.step);
            let a = analytic_flat[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            checks += 1;
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(GradcheckReport {
        max_rel_error,
        worst,
        checks,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::nn::uniform_fan_in;
    use ndarray::{Array1, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seeded(shape: &[usize], fan_in: usize, seed: u64) -> ndarray::ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform_fan_in(shape, fan_in, &mut rng)
    }

    #[test]
    fn linear_layer_grads_within_1e8() {
        let mut inputs = ParamSet::new();
        inputs.insert("x", seeded(&[5, 7], 7, 1));
        inputs.insert("w", seeded(&[7, 3], 7, 2));
        inputs.insert("b", seeded(&[3], 7, 3));
        let target = Array2::<f64>::from_shape_fn((5, 3), |(r, c)| (r + c) as f64 * 0.1);
        let report = gradcheck(
            &inputs,
            move |tape, ids| {
                let xw = tape.matmul(ids["x"], ids["w"])?;
                let y = tape.add_row_broadcast(xw, ids["b"])?;
                let t = tape.constant(target.clone().into_dyn());
                tape.mse(y, t)
            },
            &GradcheckConfig {
                tolerance: 1e-8,
                max_checks_per_tensor: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "max rel err {:.3e}", report.max_rel_error);
    }

    #[test]
    fn conv_stack_grads_within_1e6() {
        let mut inputs = ParamSet::new();
        inputs.insert("x", seeded(&[2, 3, 12], 3, 10));
        inputs.insert("w1", seeded(&[5, 3, 3], 9, 11));
        inputs.insert("b1", seeded(&[5], 9, 12));
        inputs.insert("w2", seeded(&[2, 5, 3], 15, 13));
        inputs.insert("b2", seeded(&[2], 15, 14));
        let report = gradcheck(
            &inputs,
            |tape, ids| {
                let h = tape.conv1d(ids["x"], ids["w1"], ids["b1"], 2, 1)?;
                let h = tape.silu(h);
                let h = tape.upsample_nearest2(h)?;
                let y = tape.conv1d(h, ids["w2"], ids["b2"], 1, 1)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            },
            &GradcheckConfig {
                tolerance: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "max rel err {:.3e}", report.max_rel_error);
    }

    #[test]
    fn attention_block_grads_within_1e6() {
        let d = 8;
        let mut inputs = ParamSet::new();
        inputs.insert("x", seeded(&[2, 3, d], d, 20));
        for (i, w) in ["wq", "wk", "wv", "wo"].iter().enumerate() {
            inputs.insert(w, seeded(&[d, d], d, 21 + i as u64));
        }
        for (i, b) in ["bq", "bk", "bv", "bo"].iter().enumerate() {
            inputs.insert(b, seeded(&[d], d, 25 + i as u64));
        }
        inputs.insert("gamma", ndarray::ArrayD::ones(ndarray::IxDyn(&[d])));
        inputs.insert("beta", ndarray::ArrayD::zeros(ndarray::IxDyn(&[d])));
        let report = gradcheck(
            &inputs,
            |tape, ids| {
                let xn = tape.layer_norm(ids["x"], ids["gamma"], ids["beta"], 1e-5)?;
                let y = tape.multi_head_attention(
                    xn, ids["wq"], ids["wk"], ids["wv"], ids["wo"], ids["bq"], ids["bk"],
                    ids["bv"], ids["bo"], 2,
                )?;
                let res = tape.add(y, ids["x"])?;
                let sq = tape.mul(res, res)?;
                Ok(tape.mean_all(sq))
            },
            &GradcheckConfig {
                tolerance: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "max rel err {:.3e}", report.max_rel_error);
    }

    #[test]
    fn token_assembly_grads() {
        let d = 6;
        let p = 4;
        let mut inputs = ParamSet::new();
        inputs.insert("wrist", seeded(&[3, d], d, 30));
        inputs.insert("points", seeded(&[3 * p, d], d, 31));
        inputs.insert("types", seeded(&[p + 2, d], d, 32));
        let report = gradcheck(
            &inputs,
            |tape, ids| {
                let toks = tape.assemble_tokens(ids["wrist"], ids["points"], ids["types"])?;
                let ro = tape.token_readout(toks, p + 1)?;
                let sq = tape.mul(ro, ro)?;
                Ok(tape.mean_all(sq))
            },
            &GradcheckConfig {
                tolerance: 1e-8,
                max_checks_per_tensor: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "max rel err {:.3e}", report.max_rel_error);
    }

    #[test]
    fn nonfinite_loss_is_reported() {
        let mut inputs = ParamSet::new();
        inputs.insert("x", Array1::from_elem(1, 1e308).into_dyn());
        let err = gradcheck(
            &inputs,
            |tape, ids| {
                // x * x overflows to inf before the loss.
                let sq = tape.mul(ids["x"], ids["x"])?;
                Ok(tape.mean_all(sq))
            },
            &GradcheckConfig::default(),
        );
        assert!(matches!(err, Err(NnError::NonFinite(_))));
    }
}
