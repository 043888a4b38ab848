//! Finite-difference gradient checking.

use super::{Graph, Tensor, TensorRef};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Compare reverse-mode gradients of a scalar-valued function against
/// central differences `(f(x+h) - f(x-h)) / 2h`, elementwise over every
/// input. Returns the maximum relative error, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[TensorRef]) -> Result<TensorRef>,
{
    if step <= 0.0 {
        return Err(Error::Contract(
            "grad_check step must be positive".to_string(),
        ));
    }

    // Analytic gradients.
    let mut graph = Graph::new();
    let refs: Vec<TensorRef> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let out = f(&mut graph, &refs)?;
    if !graph.value(out).is_scalar() {
        return Err(Error::Contract(format!(
            "grad_check function must return a scalar, got shape {:?}",
            graph.value(out).shape()
        )));
    }
    graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = refs
        .iter()
        .zip(inputs)
        .map(|(&r, t)| {
            graph
                .grad(r)
                .map(|g| g.values().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    // Scalar evaluation with perturbed inputs; constants record nothing.
    let eval = |points: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let refs: Vec<TensorRef> = points.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &refs)?;
        Ok(g.value(out).item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_err = 0.0f64;
    for (ti, tensor) in inputs.iter().enumerate() {
        for ei in 0..tensor.numel() {
            let orig = tensor.values()[ei];
            work[ti].values_mut()[ei] = orig + step;
            let fp = eval(&work)?;
            work[ti].values_mut()[ei] = orig - step;
            let fm = eval(&work)?;
            work[ti].values_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[ti][ei];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            max_err = max_err.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_err)
}

/// Result of one randomized primitive check.
#[derive(Debug, Clone)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

fn rand_vals(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

/// Strictly positive values bounded away from zero. Used with the quadratic
/// readout so that no true gradient entry is small: finite differences lose
/// all relative accuracy where the gradient itself is near zero.
fn rand_vals_pos(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(0.3, 1.0)).collect()
}

/// Values bounded away from zero with random signs, for kinked ops like relu
/// and for linear readout weights.
fn rand_vals_off_zero(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.uniform(0.5, 1.5);
            if rng.bernoulli(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below((hi - lo + 1) as u64) as usize
}

/// Quadratic readout sum(y * y): smooth and sensitive to every output.
fn sq_readout(g: &mut Graph, y: TensorRef) -> Result<TensorRef> {
    let y2 = g.mul(y, y)?;
    g.sum(y2)
}

/// True when every analytic gradient entry is either exactly zero or at
/// least `floor` in magnitude. Central differences carry an absolute noise
/// floor of roughly eps(f)/2h, so relative comparison is only meaningful
/// when true gradients are not incidentally tiny; exact zeros are fine
/// because the difference quotient is exactly zero there too.
fn well_conditioned<F>(f: &F, inputs: &[Tensor], floor: f64) -> Result<bool>
where
    F: Fn(&mut Graph, &[TensorRef]) -> Result<TensorRef>,
{
    let mut graph = Graph::new();
    let refs: Vec<TensorRef> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let out = f(&mut graph, &refs)?;
    graph.backward(out)?;
    for &r in &refs {
        if let Some(g) = graph.grad(r) {
            if g.values().iter().any(|&v| v != 0.0 && v.abs() < floor) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Matrix whose rows all have population variance at least 0.5. Near-
/// constant rows make layer_norm's curvature scale like (var+eps)^-3/2,
/// which destroys finite-difference accuracy.
fn layer_norm_safe_matrix(rng: &mut Rng, m: usize, n: usize) -> Vec<f64> {
    let mut vals = vec![0.0; m * n];
    for i in 0..m {
        loop {
            let row = rand_vals(rng, n, -3.0, 3.0);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            if var >= 0.5 {
                vals[i * n..(i + 1) * n].copy_from_slice(&row);
                break;
            }
        }
    }
    vals
}

/// Sparsemax input rows resampled so a +-h perturbation cannot change the
/// support: every coordinate keeps a margin from the final threshold tau,
/// and every sorted prefix keeps a margin in the support-size condition
/// `1 + j*z_(j) > cumsum_j` (near-equality there lets a perturbation flip
/// the computed support size).
fn sparsemax_safe_row(rng: &mut Rng, n: usize, margin: f64) -> Vec<f64> {
    'outer: loop {
        let row = rand_vals(rng, n, -2.0, 2.0);
        let p = super::kernels::sparsemax(&row);
        let support_sum: f64 = row
            .iter()
            .zip(&p)
            .filter(|(_, &pi)| pi > 0.0)
            .map(|(&zi, _)| zi)
            .sum();
        let k = p.iter().filter(|&&pi| pi > 0.0).count();
        // k = 1 makes the support coordinate's true gradient exactly zero
        // while rounding in z - (z - 1) still jitters f by an ulp; the
        // single-support case is covered by exact worked-example tests.
        if k < 2 {
            continue;
        }
        let tau = (support_sum - 1.0) / k as f64;
        if row.iter().any(|&zi| (zi - tau).abs() <= margin) {
            continue;
        }
        let mut sorted = row.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut cumsum = 0.0;
        for (j, &zj) in sorted.iter().enumerate() {
            cumsum += zj;
            if (1.0 + (j as f64 + 1.0) * zj - cumsum).abs() <= margin * (j as f64 + 1.0) {
                continue 'outer;
            }
        }
        return row;
    }
}

/// Run randomized finite-difference checks for every graph primitive.
/// `trials` random shapes per op (dimensions at most 8), step `h`.
pub fn primitive_suite(seed: u64, trials: usize, h: f64) -> Result<Vec<PrimitiveCheck>> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    let mut run = |name: &'static str,
                   rng: &mut Rng,
                   case: &mut dyn FnMut(&mut Rng) -> Result<f64>|
     -> Result<()> {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(case(rng)?);
        }
        results.push(PrimitiveCheck {
            name,
            max_rel_err: worst,
        });
        Ok(())
    };

    run("matmul", &mut rng, &mut |rng| {
        let (m, k, n) = (dim(rng, 1, 8), dim(rng, 1, 8), dim(rng, 1, 8));
        let a = Tensor::matrix(m, k, rand_vals_pos(rng, m * k))?;
        let b = Tensor::matrix(k, n, rand_vals_pos(rng, k * n))?;
        grad_check(
            |g, r| {
                let y = g.matmul(r[0], r[1])?;
                sq_readout(g, y)
            },
            &[a, b],
            h,
        )
    })?;

    run("add", &mut rng, &mut |rng| {
        let (m, n) = (dim(rng, 1, 8), dim(rng, 1, 8));
        let a = Tensor::matrix(m, n, rand_vals_pos(rng, m * n))?;
        let b = Tensor::matrix(m, n, rand_vals_pos(rng, m * n))?;
        grad_check(
            |g, r| {
                let y = g.add(r[0], r[1])?;
                sq_readout(g, y)
            },
            &[a, b],
            h,
        )
    })?;

    run("add_broadcast", &mut rng, &mut |rng| {
        let (m, n) = (dim(rng, 1, 8), dim(rng, 1, 8));
        let a = Tensor::matrix(m, n, rand_vals_pos(rng, m * n))?;
        let b = Tensor::vector(rand_vals_pos(rng, n))?;
        grad_check(
            |g, r| {
                let y = g.add(r[0], r[1])?;
                sq_readout(g, y)
            },
            &[a, b],
            h,
        )
    })?;

    run("multiply", &mut rng, &mut |rng| {
        let (m, n) = (dim(rng, 1, 8), dim(rng, 1, 8));
        let a = Tensor::matrix(m, n, rand_vals_pos(rng, m * n))?;
        let b = Tensor::matrix(m, n, rand_vals_pos(rng, m * n))?;
        grad_check(
            |g, r| {
                let y = g.mul(r[0], r[1])?;
                sq_readout(g, y)
            },
            &[a, b],
            h,
        )
    })?;

    run("multiply_broadcast", &mut rng, &mut |rng| {
        let (m, n) = (dim(rng, 1, 8), dim(rng, 1, 8));
        let a = Tensor::matrix(m, n, rand_vals_pos(rng, m * n))?;
        let b = Tensor::vector(rand_vals_pos(rng, n))?;
        grad_check(
            |g, r| {
                let y = g.mul(r[0], r[1])?;
                sq_readout(g, y)
            },
            &[a, b],
            h,
        )
    })?;

    run("scale", &mut rng, &mut |rng| {
        let (m, n) = (dim(rng, 1, 8), dim(rng, 1, 8));
        let c = rng.uniform(0.5, 1.5);
        let a = Tensor::matrix(m, n, rand_vals_pos(rng, m * n))?;
        grad_check(
            |g, r| {
                let y = g.scale(r[0], c)?;
                sq_readout(g, y)
            },
            &[a],
            h,
        )
    })?;

    run("reshape", &mut rng, &mut |rng| {
        let (m, n) = (dim(rng, 1, 8), dim(rng, 2, 8));
        let a = Tensor::matrix(m, n, rand_vals_pos(rng, m * n))?;
        grad_check(
            |g, r| {
                let y = g.reshape(r[0], &[m * n])?;
                sq_readout(g, y)
            },
            &[a],
            h,
        )
    })?;

    run("transpose", &mut rng, &mut |rng| {
        let (m, n) = (dim(rng, 1, 8), dim(rng, 1, 8));
        let a = Tensor::matrix(m, n, rand_vals_pos(rng, m * n))?;
        let w = Tensor::matrix(n, m, rand_vals_off_zero(rng, m * n))?;
        grad_check(
            |g, r| {
                let y = g.transpose(r[0])?;
                let c = g.constant(w.clone());
                let yw = g.mul(y, c)?;
                g.sum(yw)
            },
            &[a],
            h,
        )
    })?;

    run("concat", &mut rng, &mut |rng| {
        let axis = dim(rng, 0, 1);
        let (m, n) = (dim(rng, 1, 6), dim(rng, 1, 6));
        let (m2, n2) = if axis == 0 {
            (dim(rng, 1, 6), n)
        } else {
            (m, dim(rng, 1, 6))
        };
        let a = Tensor::matrix(m, n, rand_vals_pos(rng, m * n))?;
        let b = Tensor::matrix(m2, n2, rand_vals_pos(rng, m2 * n2))?;
        grad_check(
            |g, r| {
                let y = g.concat(&[r[0], r[1]], axis)?;
                sq_readout(g, y)
            },
            &[a, b],
            h,
        )
    })?;

    run("slice", &mut rng, &mut |rng| {
        let (m, n) = (dim(rng, 2, 8), dim(rng, 2, 8));
        let axis = dim(rng, 0, 1);
        let extent = if axis == 0 { m } else { n };
        let len = dim(rng, 1, extent);
        let start = dim(rng, 0, extent - len);
        let a = Tensor::matrix(m, n, rand_vals_pos(rng, m * n))?;
        grad_check(
            |g, r| {
                let y = g.slice(r[0], axis, start, len)?;
                sq_readout(g, y)
            },
            &[a],
            h,
        )
    })?;

    run("relu", &mut rng, &mut |rng| {
        let (m, n) = (dim(rng, 1, 8), dim(rng, 1, 8));
        let a = Tensor::matrix(m, n, rand_vals_off_zero(rng, m * n))?;
        grad_check(
            |g, r| {
                let y = g.relu(r[0])?;
                sq_readout(g, y)
            },
            &[a],
            h,
        )
    })?;

    run("layer_norm", &mut rng, &mut |rng| loop {
        let (m, n) = (dim(rng, 1, 8), dim(rng, 2, 8));
        let a = Tensor::matrix(m, n, layer_norm_safe_matrix(rng, m, n))?;
        let w = Tensor::matrix(m, n, rand_vals_off_zero(rng, m * n))?;
        let f = |g: &mut Graph, r: &[TensorRef]| {
            let y = g.layer_norm(r[0], 1e-5)?;
            let c = g.constant(w.clone());
            let yw = g.mul(y, c)?;
            g.sum(yw)
        };
        if well_conditioned(&f, std::slice::from_ref(&a), 1e-4)? {
            return grad_check(f, &[a], h);
        }
    })?;

    run("softmax_rows", &mut rng, &mut |rng| loop {
        let (m, n) = (dim(rng, 1, 8), dim(rng, 2, 8));
        let a = Tensor::matrix(m, n, rand_vals(rng, m * n, -2.0, 2.0))?;
        let w = Tensor::matrix(m, n, rand_vals_off_zero(rng, m * n))?;
        let f = |g: &mut Graph, r: &[TensorRef]| {
            let y = g.softmax_rows(r[0])?;
            let c = g.constant(w.clone());
            let yw = g.mul(y, c)?;
            g.sum(yw)
        };
        if well_conditioned(&f, std::slice::from_ref(&a), 1e-4)? {
            return grad_check(f, &[a], h);
        }
    })?;

    run("log_softmax_rows", &mut rng, &mut |rng| loop {
        let (m, n) = (dim(rng, 1, 8), dim(rng, 2, 8));
        let a = Tensor::matrix(m, n, rand_vals(rng, m * n, -2.0, 2.0))?;
        let w = Tensor::matrix(m, n, rand_vals_off_zero(rng, m * n))?;
        let f = |g: &mut Graph, r: &[TensorRef]| {
            let y = g.log_softmax_rows(r[0])?;
            let c = g.constant(w.clone());
            let yw = g.mul(y, c)?;
            g.sum(yw)
        };
        if well_conditioned(&f, std::slice::from_ref(&a), 1e-4)? {
            return grad_check(f, &[a], h);
        }
    })?;

    run("embedding_lookup", &mut rng, &mut |rng| {
        let (v, d) = (dim(rng, 2, 8), dim(rng, 1, 8));
        let n_ids = dim(rng, 1, 8);
        let ids: Vec<usize> = (0..n_ids).map(|_| rng.below(v as u64) as usize).collect();
        let table = Tensor::matrix(v, d, rand_vals_pos(rng, v * d))?;
        grad_check(
            |g, r| {
                let y = g.embedding_lookup(r[0], &ids)?;
                sq_readout(g, y)
            },
            &[table],
            h,
        )
    })?;

    run("replace_rows", &mut rng, &mut |rng| {
        let (m, d) = (dim(rng, 2, 8), dim(rng, 1, 8));
        let n_rep = dim(rng, 1, m);
        let mut avail: Vec<usize> = (0..m).collect();
        let mut indices = Vec::new();
        for _ in 0..n_rep {
            let pick = rng.below(avail.len() as u64) as usize;
            indices.push(avail.swap_remove(pick));
        }
        let base = Tensor::matrix(m, d, rand_vals_pos(rng, m * d))?;
        let rows = Tensor::matrix(n_rep, d, rand_vals_pos(rng, n_rep * d))?;
        grad_check(
            |g, r| {
                let y = g.replace_rows(r[0], r[1], &indices)?;
                sq_readout(g, y)
            },
            &[base, rows],
            h,
        )
    })?;

    run("sum", &mut rng, &mut |rng| {
        let (m, n) = (dim(rng, 1, 8), dim(rng, 1, 8));
        let a = Tensor::matrix(m, n, rand_vals_pos(rng, m * n))?;
        grad_check(
            |g, r| {
                let y = g.mul(r[0], r[0])?;
                g.sum(y)
            },
            &[a],
            h,
        )
    })?;

    run("mean", &mut rng, &mut |rng| {
        let (m, n) = (dim(rng, 1, 8), dim(rng, 1, 8));
        let a = Tensor::matrix(m, n, rand_vals_pos(rng, m * n))?;
        grad_check(
            |g, r| {
                let y = g.mul(r[0], r[0])?;
                g.mean(y)
            },
            &[a],
            h,
        )
    })?;

    run("cross_entropy", &mut rng, &mut |rng| {
        let (n, v) = (dim(rng, 1, 8), dim(rng, 2, 8));
        let logits = Tensor::matrix(n, v, rand_vals(rng, n * v, -2.0, 2.0))?;
        let targets: Vec<usize> = (0..n).map(|_| rng.below(v as u64) as usize).collect();
        let mut keep: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.7)).collect();
        if keep.iter().all(|&k| !k) {
            keep[0] = true;
        }
        grad_check(|g, r| g.cross_entropy(r[0], &targets, &keep), &[logits], h)
    })?;

    run("sparsemax", &mut rng, &mut |rng| loop {
        let n = dim(rng, 2, 8);
        let row = sparsemax_safe_row(rng, n, 100.0 * h);
        let a = Tensor::matrix(1, n, row)?;
        let w = Tensor::matrix(1, n, rand_vals_off_zero(rng, n))?;
        let f = |g: &mut Graph, r: &[TensorRef]| {
            let y = g.sparsemax_rows(r[0])?;
            let c = g.constant(w.clone());
            let yw = g.mul(y, c)?;
            g.sum(yw)
        };
        if well_conditioned(&f, std::slice::from_ref(&a), 1e-4)? {
            return grad_check(f, &[a], h);
        }
    })?;

    Ok(results)
}
