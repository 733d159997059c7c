use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::tape::{Tape, TensorRef};
use crate::error::Result;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Compares the tape's analytic gradients of a scalar function against
/// central finite differences in 64-bit arithmetic.
///
/// `build` records the computation on a fresh tape given leaves for each
/// input; the return value must be scalar. Inputs larger than `probe_limit`
/// elements are probed at `probe_limit` seeded-random positions instead of
/// exhaustively.
pub fn grad_check<F>(build: F, inputs: &[(Vec<usize>, Vec<f64>)], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[TensorRef]) -> Result<TensorRef>,
{
    const PROBE_LIMIT: usize = 256;
    const H: f64 = 1e-5;

    let eval = |values: &[Vec<f64>]| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape: Tape<f64> = Tape::new();
        let refs: Vec<TensorRef> = inputs
            .iter()
            .zip(values)
            .map(|((shape, _), data)| tape.var(shape, data.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &refs)?;
        tape.backward(loss)?;
        let grads = refs.iter().map(|&r| tape.grad(r).to_vec()).collect();
        Ok((tape.data(loss)[0], grads))
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let (_, analytic) = eval(&base)?;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x6f7261636c65);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        failures: Vec::new(),
    };
    for (i, (_, data)) in inputs.iter().enumerate() {
        let mut positions: Vec<usize> = (0..data.len()).collect();
        if positions.len() > PROBE_LIMIT {
            positions.shuffle(&mut rng);
            positions.truncate(PROBE_LIMIT);
        }
        for j in positions {
            let mut plus = base.clone();
            plus[i][j] += H;
            let mut minus = base.clone();
            minus[i][j] -= H;
            let (fp, _) = eval(&plus)?;
            let (fm, _) = eval(&minus)?;
            let fd = (fp - fm) / (2.0 * H);
            let an = analytic[i][j];
            let err = rel_err(an, fd);
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
            if err > tol {
                report.failures.push(format!(
                    "input {} element {}: analytic {:.6e} vs finite difference {:.6e} (rel err {:.3e})",
                    i, j, an, fd, err
                ));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_checks_tightly() {
        let report = grad_check(
            |tape, inputs| tape.sum(inputs[0]),
            &[(vec![4], vec![1.0, -2.0, 3.0, 0.5])],
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
        assert!(report.max_rel_err < 1e-9);
    }

    #[test]
    fn conv_relu_softmax_composite_passes() {
        let input: Vec<f64> = (0..27).map(|i| ((i * 7) % 13) as f64 * 0.1 - 0.6).collect();
        let weights: Vec<f64> = (0..27).map(|i| ((i * 5) % 11) as f64 * 0.05 - 0.25).collect();
        let report = grad_check(
            |tape, inputs| {
                let y = tape.conv3(inputs[0], inputs[1], None, 1, 1)?;
                let r = tape.relu(y)?;
                let flat = tape.reshape(r, &[27])?;
                let s = tape.softmax(flat, 0)?;
                let picked = tape.scale(s, 2.0)?;
                tape.sum(picked)
            },
            &[
                (vec![1, 3, 3, 3], input),
                (vec![1, 1, 3, 3, 3], weights),
            ],
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        // The first evaluation (the analytic pass) sees scale factor 2, the
        // finite-difference probes see factor 3, so the analytic gradient is
        // wrong by construction and the report must flag it.
        let calls = std::cell::Cell::new(0usize);
        let report = grad_check(
            |tape, inputs| {
                let factor = if calls.get() == 0 { 2.0 } else { 3.0 };
                calls.set(calls.get() + 1);
                let scaled = tape.scale(inputs[0], factor)?;
                tape.sum(scaled)
            },
            &[(vec![3], vec![1.0, 2.0, 3.0])],
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures.len(), 3);
    }
}
