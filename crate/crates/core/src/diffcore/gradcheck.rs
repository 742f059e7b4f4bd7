use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Upper bound on the number of coordinates perturbed.
    pub max_checked: usize,
    /// Seed for choosing which coordinates to perturb when there are too many.
    pub seed: u64,
    /// Test hook: skews every analytic derivative so the harness must fail.
    #[doc(hidden)]
    pub corrupt_analytic: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-5,
            max_checked: 64,
            seed: 0,
            corrupt_analytic: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub checked: usize,
    /// parameter name and flat index of the worst coordinate
    pub worst: Option<(String, usize)>,
    pub passed: bool,
}

/// Compares the analytic gradient of the scalar `output` against central
/// finite differences, perturbing the `requires_grad` inputs of `graph` one
/// coordinate at a time.
pub fn grad_check(
    graph: &mut Graph,
    output: Var,
    inputs: &HashMap<String, Tensor>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if opts.step.is_nan() || opts.step <= 0.0 {
        return Err(Error::Invalid(format!("grad_check step must be positive, got {}", opts.step)));
    }
    graph.zero_grad();
    let f0 = graph.eval(inputs, output)?.item();
    if !f0.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    graph.backward(output)?;

    let mut coords = Vec::new();
    let mut analytic = HashMap::new();
    for (name, var) in graph.trainable_inputs() {
        let n = inputs.get(name).map_or(0, Tensor::len);
        let g = match graph.grad(var) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; n],
        };
        coords.extend((0..n).map(|i| (name.to_string(), i)));
        analytic.insert(name.to_string(), g);
    }
    if coords.len() > opts.max_checked {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        coords.shuffle(&mut rng);
        coords.truncate(opts.max_checked);
        coords.sort();
    }

    let mut work = inputs.clone();
    let mut max_rel = 0.0_f64;
    let mut worst = None;
    for (name, idx) in &coords {
        let original = work[name].data()[idx.to_owned()];
        let mut eval_at = |x: f64, work: &mut HashMap<String, Tensor>| -> Result<f64> {
            work.get_mut(name).expect("coordinate names come from inputs").data_mut()[*idx] = x;
            let v = graph.eval(&*work, output)?.item();
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite { op: "grad_check" })
            }
        };
        let plus = eval_at(original + opts.step, &mut work)?;
        let minus = eval_at(original - opts.step, &mut work)?;
        work.get_mut(name).unwrap().data_mut()[*idx] = original;

        let numeric = (plus - minus) / (2.0 * opts.step);
        let mut a = analytic[name][*idx];
        if opts.corrupt_analytic {
            a = a * 1.01 + 1e-3;
        }
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        if rel > max_rel || worst.is_none() {
            max_rel = max_rel.max(rel);
            worst = Some((name.clone(), *idx));
        }
    }
    // leave the graph evaluated at the unperturbed point
    graph.forward(inputs)?;

    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked: coords.len(),
        worst,
        passed: max_rel <= opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_form_is_exact() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let x = g.input("x", 1, 4, true).unwrap();
            let a = g.input("a", 4, 4, false).unwrap();
            let ax = g.matmul_nt(a, x).unwrap(); // 4x1 = A xᵀ
            let xax = g.matmul(x, ax).unwrap();
            let mut inputs = HashMap::new();
            inputs.insert("x".into(), random_matrix(&mut rng, 1, 4));
            inputs.insert("a".into(), random_matrix(&mut rng, 4, 4));
            let report = grad_check(&mut g, xax, &inputs, &GradCheckOptions::default()).unwrap();
            assert_eq!(report.checked, 4);
            assert!(report.max_rel_error <= 1e-6, "{report:?}");
        }
    }

    #[test]
    fn every_op_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let a = g.input("a", 3, 4, true).unwrap();
        let b = g.input("b", 4, 2, true).unwrap();
        let r = g.input("r", 1, 2, true).unwrap();
        let ab = g.matmul(a, b).unwrap();
        let ab = g.add_row(ab, r).unwrap();
        let sm = g.softmax(ab).unwrap();
        let ls = g.log_softmax(ab).unwrap();
        let picked = g.pick(ls, &[0, 1, 1]).unwrap();
        let rel = g.relu(a).unwrap();
        let top = g.slice_rows(rel, 0, 2).unwrap();
        let cat = g.concat_rows(&[top, a]).unwrap();
        let emb = g.gather(cat, &[4, 0, 0]).unwrap();
        let d = g.sq_dist(emb, a).unwrap();
        let nd = g.scale(d, -0.3).unwrap();
        let k = g.exp(nd).unwrap();
        let km = g.mean(k).unwrap();
        let sq = g.mul(sm, sm).unwrap();
        let shifted = g.add_row(sq, r).unwrap();
        let one = g.constant(Tensor::matrix(3, 2, vec![2.0; 6]).unwrap()).unwrap();
        let pos = g.add(shifted, one).unwrap();
        let lg = g.log(pos).unwrap();
        let s1 = g.sum(lg).unwrap();
        let s2 = g.sum(picked).unwrap();
        let m = g.min_const(km, 100.0).unwrap();
        let t = g.sub(s1, s2).unwrap();
        let out = g.add(t, m).unwrap();
        let mut inputs = HashMap::new();
        inputs.insert("a".into(), random_matrix(&mut rng, 3, 4));
        inputs.insert("b".into(), random_matrix(&mut rng, 4, 2));
        inputs.insert("r".into(), random_matrix(&mut rng, 1, 2));
        let report = grad_check(&mut g, out, &inputs, &GradCheckOptions::default()).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn corrupted_derivative_fails() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 1, true).unwrap();
        let y = g.mul(x, x).unwrap();
        let mut inputs = HashMap::new();
        inputs.insert("x".into(), Tensor::scalar(0.7));
        let opts = GradCheckOptions {
            corrupt_analytic: true,
            ..Default::default()
        };
        assert!(!grad_check(&mut g, y, &inputs, &opts).unwrap().passed);
    }

    #[test]
    fn linearity_of_backward() {
        // backward(a·f + b·g) == a·∇f + b·∇g
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = random_matrix(&mut rng, 2, 3);
        let build = |wf: f64, wg: f64| {
            let mut g = Graph::new();
            let x = g.input("x", 2, 3, true).unwrap();
            let e = g.exp(x).unwrap();
            let f = g.sum(e).unwrap();
            let sq = g.mul(x, x).unwrap();
            let r = g.relu(sq).unwrap();
            let h = g.mean(r).unwrap();
            let a = g.scale(f, wf).unwrap();
            let b = g.scale(h, wg).unwrap();
            let out = g.add(a, b).unwrap();
            let mut inputs = HashMap::new();
            inputs.insert("x".to_string(), x0.clone());
            g.forward(&inputs).unwrap();
            g.backward(out).unwrap();
            g.grad(x).unwrap().data().to_vec()
        };
        let gf = build(1.0, 0.0);
        let gg = build(0.0, 1.0);
        let combo = build(2.5, -0.75);
        for i in 0..gf.len() {
            let expected = 2.5 * gf[i] - 0.75 * gg[i];
            assert!((combo[i] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
    }
}
