//! Dense f64 math kernels behind the graph operations.
//!
//! Row-major storage throughout. The matmul variants are written so the
//! inner loops run over contiguous slices, which LLVM vectorizes; this is
//! the hot path of the whole crate.

/// out += a @ b, a: [m x k], b: [k x n], out: [m x n].
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &al) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += al * bv;
            }
        }
    }
}

/// out = a @ b.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

/// out += a @ b^T, a: [m x k], b: [n x k], out: [m x n]. Row-dot form.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out += a^T @ b, a: [m x k], b: [m x n], out: [k x n]. Outer-product form.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for l in 0..m {
        let arow = &a[l * k..(l + 1) * k];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Numerically stabilized softmax of one row, in place.
pub fn softmax_row_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// softmax(alpha * scores) as a fresh vector.
pub fn softmax_weights(scores: &[f64], alpha: f64) -> Vec<f64> {
    let mut w: Vec<f64> = scores.iter().map(|&s| alpha * s).collect();
    softmax_row_inplace(&mut w);
    w
}

/// log-softmax of one row, in place.
pub fn log_softmax_row_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Euclidean projection of `z` onto the probability simplex.
///
/// Sort descending, find the largest prefix k with 1 + k*z_(k) > sum of the
/// prefix, threshold tau = (prefix sum - 1)/k, output max(z - tau, 0).
pub fn sparsemax(z: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = z.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut k = 0;
    let mut support_sum = 0.0;
    for (j, &zj) in sorted.iter().enumerate() {
        cumsum += zj;
        if 1.0 + (j as f64 + 1.0) * zj > cumsum {
            k = j + 1;
            support_sum = cumsum;
        }
    }
    let tau = (support_sum - 1.0) / k as f64;
    z.iter().map(|&v| (v - tau).max(0.0)).collect()
}

/// How far `z` sits from a sparsemax support change: the minimum over the
/// distances |z_i - tau| and the per-prefix slack of the support-size
/// condition `1 + j*z_(j) > cumsum_j` (normalized by j). Also returns the
/// support size. Small margins mean a perturbation can flip the support.
pub fn sparsemax_support_margin(z: &[f64]) -> (f64, usize) {
    let p = sparsemax(z);
    let k = p.iter().filter(|&&pi| pi > 0.0).count();
    let support_sum: f64 = z
        .iter()
        .zip(&p)
        .filter(|(_, &pi)| pi > 0.0)
        .map(|(&zi, _)| zi)
        .sum();
    let tau = (support_sum - 1.0) / k as f64;
    let mut margin = f64::INFINITY;
    for &zi in z {
        margin = margin.min((zi - tau).abs());
    }
    let mut sorted = z.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    for (j, &zj) in sorted.iter().enumerate() {
        cumsum += zj;
        let jf = j as f64 + 1.0;
        margin = margin.min((1.0 + jf * zj - cumsum).abs() / jf);
    }
    (margin, k)
}

/// Backward rule for sparsemax: given output `p` and upstream gradient `g`,
/// downstream = (g - mean of g over the support) on the support, 0 elsewhere.
pub fn sparsemax_backward(p: &[f64], g: &[f64], out: &mut [f64]) {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (&pi, &gi) in p.iter().zip(g) {
        if pi > 0.0 {
            sum += gi;
            count += 1;
        }
    }
    let mean = sum / count as f64;
    for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(g) {
        *o += if pi > 0.0 { gi - mean } else { 0.0 };
    }
}

/// Index of the maximum value; ties broken by lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Indices of the k largest values, ties broken by lowest index. Returned in
/// descending score order.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(row.len());
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps the lowest index first among ties
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] @ [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect(); // 3x4
        let b: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect(); // 4x5
        let direct = matmul(&a, &b, 3, 4, 5);

        // a @ b == a @ (b^T)^T via nt kernel
        let mut bt = vec![0.0; 20];
        for i in 0..4 {
            for j in 0..5 {
                bt[j * 4 + i] = b[i * 5 + j];
            }
        }
        let mut via_nt = vec![0.0; 15];
        matmul_nt_acc(&a, &bt, 3, 4, 5, &mut via_nt);
        for (x, y) in direct.iter().zip(&via_nt) {
            assert!((x - y).abs() < 1e-12);
        }

        // a @ b == (a^T)^T @ b via tn kernel
        let mut at = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                at[j * 3 + i] = a[i * 4 + j];
            }
        }
        let mut via_tn = vec![0.0; 15];
        matmul_tn_acc(&at, &b, 4, 3, 5, &mut via_tn);
        for (x, y) in direct.iter().zip(&via_tn) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_row_sums_to_one() {
        let mut row = [1.0, 2.0, 3.0, -1.0];
        softmax_row_inplace(&mut row);
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn sparsemax_worked_examples() {
        assert_eq!(sparsemax(&[0.5, 0.5]), vec![0.5, 0.5]);
        assert_eq!(sparsemax(&[2.0, 0.0]), vec![1.0, 0.0]);
        let p = sparsemax(&[1.2, 1.0, -5.0]);
        assert!((p[0] - 0.6).abs() < 1e-12);
        assert!((p[1] - 0.4).abs() < 1e-12);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0, 2.0]), 0);
    }

    #[test]
    fn topk_ties_prefer_low_index() {
        assert_eq!(topk_indices(&[5.0, 5.0, -100.0, -100.0], 2), vec![0, 1]);
        assert_eq!(topk_indices(&[1.0, 9.0, 3.0], 2), vec![1, 2]);
        assert_eq!(topk_indices(&[1.0, 2.0], 10), vec![1, 0]);
    }
}
