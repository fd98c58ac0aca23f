//! Forward and reverse kernels: embedding lookup, affine+ReLU projection,
//! half convolution and width-2 max-pooling over time.

use super::{Mat, ParamTensor};
use crate::error::{Result, TrfError};

/// Zero columns padded before the input of a width-`k` half convolution.
/// The remaining `k - 1 - pad_before(k)` columns go after it.
#[inline]
pub fn pad_before(k: usize) -> usize {
    k / 2
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn relu_mat(pre: &Mat) -> Mat {
    Mat {
        rows: pre.rows,
        cols: pre.cols,
        data: pre.data.iter().map(|&x| relu(x)).collect(),
    }
}

/// Masks `grad` in place by the ReLU derivative at `pre` (0 at the kink).
pub fn relu_backward_inplace(pre: &Mat, grad: &mut Mat) {
    for (g, &p) in grad.data.iter_mut().zip(&pre.data) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Column `i` of the result is row `ids[i]` of the `|V| x d` table.
pub fn embed_forward(ids: &[u32], table: &ParamTensor) -> Result<Mat> {
    let (v, d) = (table.shape[0], table.shape[1]);
    let l = ids.len();
    let mut out = Mat::zeros(d, l);
    for (i, &id) in ids.iter().enumerate() {
        let id = id as usize;
        if id >= v {
            return Err(TrfError::Index { index: id, size: v });
        }
        let row = &table.values[id * d..(id + 1) * d];
        for (r, &x) in row.iter().enumerate() {
            out.set(r, i, x);
        }
    }
    Ok(out)
}

/// Scatters column `i` of `upstream` into row `ids[i]` of `dtable`.
pub fn embed_backward(ids: &[u32], upstream: &Mat, dtable: &mut [f64]) {
    let d = upstream.rows;
    for (i, &id) in ids.iter().enumerate() {
        let row = &mut dtable[id as usize * d..(id as usize + 1) * d];
        for (r, g) in row.iter_mut().enumerate() {
            *g += upstream.get(r, i);
        }
    }
}

/// `W·Y + b` per column, `W` stored row-major as `rows x Y.rows`.
pub fn affine_forward(y: &Mat, w: &ParamTensor, b: &ParamTensor) -> Result<Mat> {
    let (out_dim, in_dim) = (w.shape[0], w.shape[1]);
    if in_dim != y.rows || b.len() != out_dim {
        return Err(TrfError::Shape(format!(
            "affine: W is {out_dim}x{in_dim}, b has {}, input has {} rows",
            b.len(),
            y.rows
        )));
    }
    let mut out = Mat::zeros(out_dim, y.cols);
    for o in 0..out_dim {
        let wrow = &w.values[o * in_dim..(o + 1) * in_dim];
        let orow = out.row_mut(o);
        orow.iter_mut().for_each(|v| *v = b.values[o]);
        for (c, &wv) in wrow.iter().enumerate() {
            if wv == 0.0 {
                continue;
            }
            for (ov, &yv) in orow.iter_mut().zip(y.row(c)) {
                *ov += wv * yv;
            }
        }
    }
    Ok(out)
}

/// `max{W·y + b, 0}` per column. Returns `(pre_activation, output)`.
pub fn affine_relu_forward(y: &Mat, w: &ParamTensor, b: &ParamTensor) -> Result<(Mat, Mat)> {
    let pre = affine_forward(y, w, b)?;
    let out = relu_mat(&pre);
    Ok((pre, out))
}

/// Reverse of [`affine_forward`] given the gradient w.r.t. the
/// pre-activation. Accumulates into `dw`, `db`; returns the input gradient.
pub fn affine_backward(y: &Mat, w: &ParamTensor, dpre: &Mat, dw: &mut [f64], db: &mut [f64]) -> Mat {
    let (out_dim, in_dim) = (w.shape[0], w.shape[1]);
    let mut dy = Mat::zeros(in_dim, y.cols);
    for o in 0..out_dim {
        let grow = dpre.row(o);
        db[o] += grow.iter().sum::<f64>();
        for c in 0..in_dim {
            let yrow = y.row(c);
            dw[o * in_dim + c] += grow.iter().zip(yrow).map(|(g, x)| g * x).sum::<f64>();
            let wv = w.values[o * in_dim + c];
            if wv != 0.0 {
                for (d, &g) in dy.row_mut(c).iter_mut().zip(grow) {
                    *d += wv * g;
                }
            }
        }
    }
    dy
}

/// Range of output positions `i` for which `i + t - before` is inside `0..l`.
#[inline]
fn tap_range(l: usize, t: usize, before: usize) -> (usize, usize) {
    let lo = before.saturating_sub(t);
    let hi = (l + before).saturating_sub(t).min(l);
    (lo, hi.max(lo))
}

/// Multi-filter half convolution (pre-activation). `weight` has shape
/// `c_out x c_in x k`; the output keeps the input length.
pub fn conv_half_forward(input: &Mat, weight: &[f64], c_out: usize, k: usize) -> Mat {
    let (c_in, l) = (input.rows, input.cols);
    debug_assert_eq!(weight.len(), c_out * c_in * k);
    let before = pad_before(k);
    let mut out = Mat::zeros(c_out, l);
    for o in 0..c_out {
        let orow = &mut out.data[o * l..(o + 1) * l];
        for c in 0..c_in {
            let irow = input.row(c);
            for t in 0..k {
                let wv = weight[(o * c_in + c) * k + t];
                if wv == 0.0 {
                    continue;
                }
                let (lo, hi) = tap_range(l, t, before);
                for i in lo..hi {
                    orow[i] += wv * irow[i + t - before];
                }
            }
        }
    }
    out
}

/// Reverse of [`conv_half_forward`]: accumulates the weight gradient into
/// `dweight` and the input gradient into `dinput`.
pub fn conv_half_backward(
    input: &Mat,
    weight: &[f64],
    c_out: usize,
    k: usize,
    dpre: &Mat,
    dweight: &mut [f64],
    dinput: &mut Mat,
) {
    let (c_in, l) = (input.rows, input.cols);
    let before = pad_before(k);
    for o in 0..c_out {
        let grow = dpre.row(o);
        if grow.iter().all(|&g| g == 0.0) {
            continue;
        }
        for c in 0..c_in {
            let irow = input.row(c);
            for t in 0..k {
                let idx = (o * c_in + c) * k + t;
                let wv = weight[idx];
                let (lo, hi) = tap_range(l, t, before);
                let mut acc = 0.0;
                let drow = &mut dinput.data[c * l..(c + 1) * l];
                for i in lo..hi {
                    acc += grow[i] * irow[i + t - before];
                    drow[i + t - before] += wv * grow[i];
                }
                dweight[idx] += acc;
            }
        }
    }
}

/// Single-filter half convolution with ReLU: `f[i] = max{<Y'[:, i..i+k], F>, 0}`.
pub fn halfconv_forward(y: &Mat, filter: &ParamTensor) -> Result<Vec<f64>> {
    let (d, k) = (filter.shape[0], filter.shape[1]);
    if d != y.rows || k == 0 {
        return Err(TrfError::Shape(format!(
            "halfconv: filter {d}x{k} against input with {} rows",
            y.rows
        )));
    }
    let pre = conv_half_forward(y, &filter.values, 1, k);
    Ok(pre.data.into_iter().map(relu).collect())
}

/// Which input column fed a max-pool output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolSource {
    /// The left zero pad.
    Pad,
    /// Input column with this index.
    Column(usize),
}

/// Width-2, stride-1 max-pooling over time with one zero column padded on
/// the left: `out[:, i] = max(in[:, i-1], in[:, i])`, `in[:, -1] = 0`.
/// Ties go to the current column.
pub fn maxpool_time(y: &Mat) -> (Mat, Vec<PoolSource>) {
    let (d, l) = (y.rows, y.cols);
    let mut out = Mat::zeros(d, l);
    let mut src = Vec::with_capacity(d * l);
    for r in 0..d {
        let row = y.row(r);
        for i in 0..l {
            let cur = row[i];
            let (prev, prev_src) = if i == 0 { (0.0, PoolSource::Pad) } else { (row[i - 1], PoolSource::Column(i - 1)) };
            if prev > cur {
                out.set(r, i, prev);
                src.push(prev_src);
            } else {
                out.set(r, i, cur);
                src.push(PoolSource::Column(i));
            }
        }
    }
    (out, src)
}

pub fn maxpool_backward(src: &[PoolSource], dout: &Mat) -> Mat {
    let (d, l) = (dout.rows, dout.cols);
    let mut din = Mat::zeros(d, l);
    for r in 0..d {
        for i in 0..l {
            if let PoolSource::Column(j) = src[r * l + i] {
                din.add(r, j, dout.get(r, i));
            }
        }
    }
    din
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_grad;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(name: &str, shape: &[usize], values: Vec<f64>) -> ParamTensor {
        let mut t = ParamTensor::zeros(name, shape);
        t.values = values;
        t
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn embed_examples() {
        let table = tensor("e", &[3, 2], vec![1.0, 0.0, 0.0, 1.0, 5.0, 6.0]);
        let out = embed_forward(&[0, 1], &table).unwrap();
        assert_eq!(out.column(0), vec![1.0, 0.0]);
        assert_eq!(out.column(1), vec![0.0, 1.0]);
        let rep = embed_forward(&[2, 2], &table).unwrap();
        assert_eq!(rep.column(0), rep.column(1));
        assert!(matches!(embed_forward(&[3], &table), Err(TrfError::Index { .. })));
    }

    #[test]
    fn embed_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut table = ParamTensor::uniform("e", &[4, 3], 1.0, &mut rng);
        let ids = [2u32, 0, 2];
        let g = Mat::from_vec(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut analytic = vec![0.0; 12];
        embed_backward(&ids, &g, &mut analytic);
        let x0 = table.values.clone();
        let numeric = finite_diff_grad(
            |v| {
                table.values.copy_from_slice(v);
                let out = embed_forward(&ids, &table).unwrap();
                out.data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
            },
            &x0,
            1e-6,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn affine_relu_examples() {
        let w = tensor("w", &[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = tensor("b", &[2], vec![0.0, 0.0]);
        let y = Mat::from_vec(2, 1, vec![-1.0, 2.0]).unwrap();
        let (_, out) = affine_relu_forward(&y, &w, &b).unwrap();
        assert_eq!(out.data, vec![0.0, 2.0]);

        let w0 = tensor("w", &[2, 2], vec![0.0; 4]);
        let b = tensor("b", &[2], vec![3.0, -3.0]);
        let y = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (_, out) = affine_relu_forward(&y, &w0, &b).unwrap();
        for i in 0..3 {
            assert_eq!(out.column(i), vec![3.0, 0.0]);
        }

        let bad = tensor("w", &[2, 3], vec![0.0; 6]);
        assert!(affine_relu_forward(&y, &bad, &b).is_err());
    }

    #[test]
    fn affine_relu_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut checked = 0;
        while checked < 20 {
            let y = Mat::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let mut w = ParamTensor::uniform("w", &[2, 3], 1.0, &mut rng);
            let b = ParamTensor::uniform("b", &[2], 1.0, &mut rng);
            let up = Mat::from_vec(2, 4, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let (pre, _) = affine_relu_forward(&y, &w, &b).unwrap();
            if pre.data.iter().any(|p| p.abs() < 1e-4) {
                continue;
            }
            let mut dpre = up.clone();
            relu_backward_inplace(&pre, &mut dpre);
            let mut dw = vec![0.0; 6];
            let mut db = vec![0.0; 2];
            affine_backward(&y, &w, &dpre, &mut dw, &mut db);
            let w0 = w.values.clone();
            let numeric = finite_diff_grad(
                |v| {
                    w.values.copy_from_slice(v);
                    let (_, out) = affine_relu_forward(&y, &w, &b).unwrap();
                    out.data.iter().zip(&up.data).map(|(a, b)| a * b).sum()
                },
                &w0,
                1e-6,
            )
            .unwrap();
            for (a, n) in dw.iter().zip(&numeric) {
                assert!(rel_err(*a, *n) < 1e-6, "{a} vs {n}");
            }
            checked += 1;
        }
    }

    #[test]
    fn halfconv_hand_example() {
        let y = Mat::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let f = tensor("f", &[1, 2], vec![1.0, 1.0]);
        assert_eq!(halfconv_forward(&y, &f).unwrap(), vec![1.0, 3.0, 5.0]);
    }

    #[test]
    fn halfconv_width_one_and_zero_filter() {
        let y = Mat::from_vec(1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        let f = tensor("f", &[1, 1], vec![2.0]);
        assert_eq!(halfconv_forward(&y, &f).unwrap(), vec![2.0, 0.0, 6.0]);
        let z = tensor("f", &[1, 4], vec![0.0; 4]);
        assert_eq!(halfconv_forward(&y, &z).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn halfconv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut done = 0;
        while done < 20 {
            let k = rng.random_range(1..=5);
            let (c_in, c_out, l) = (3, 2, rng.random_range(1..=6));
            let input = Mat::from_vec(c_in, l, (0..c_in * l).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let weight: Vec<f64> = (0..c_out * c_in * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let up: Vec<f64> = (0..c_out * l).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pre = conv_half_forward(&input, &weight, c_out, k);
            if pre.data.iter().any(|p| p.abs() < 1e-4) {
                continue;
            }
            let mut dpre = Mat::from_vec(c_out, l, up.clone()).unwrap();
            relu_backward_inplace(&pre, &mut dpre);
            let mut dw = vec![0.0; weight.len()];
            let mut din = Mat::zeros(c_in, l);
            conv_half_backward(&input, &weight, c_out, k, &dpre, &mut dw, &mut din);

            let loss = |inp: &Mat, w: &[f64]| -> f64 {
                let out = relu_mat(&conv_half_forward(inp, w, c_out, k));
                out.data.iter().zip(&up).map(|(a, b)| a * b).sum()
            };
            let nw = finite_diff_grad(|w| loss(&input, w), &weight, 1e-6).unwrap();
            let ni = finite_diff_grad(
                |x| loss(&Mat::from_vec(c_in, l, x.to_vec()).unwrap(), &weight),
                &input.data,
                1e-6,
            )
            .unwrap();
            for (a, n) in dw.iter().zip(&nw).chain(din.data.iter().zip(&ni)) {
                assert!(rel_err(*a, *n) < 1e-6, "k={k}: {a} vs {n}");
            }
            done += 1;
        }
    }

    #[test]
    fn maxpool_examples() {
        let y = Mat::from_vec(1, 3, vec![1.0, 3.0, 5.0]).unwrap();
        assert_eq!(maxpool_time(&y).0.data, vec![1.0, 3.0, 5.0]);
        let y = Mat::from_vec(1, 1, vec![-2.0]).unwrap();
        let (out, src) = maxpool_time(&y);
        assert_eq!(out.data, vec![0.0]);
        assert_eq!(src, vec![PoolSource::Pad]);
        let y = Mat::from_vec(1, 4, vec![4.0, 1.0, 0.5, 2.0]).unwrap();
        assert_eq!(maxpool_time(&y).0.data, vec![4.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn maxpool_backward_routes_to_winner() {
        let y = Mat::from_vec(1, 3, vec![5.0, 1.0, 2.0]).unwrap();
        let (_, src) = maxpool_time(&y);
        let din = maxpool_backward(&src, &Mat::from_vec(1, 3, vec![1.0, 10.0, 100.0]).unwrap());
        assert_eq!(din.data, vec![11.0, 0.0, 100.0]);
    }

    proptest! {
        #[test]
        fn time_dimension_is_preserved(l in 1usize..20, k in 1usize..=10, d in 1usize..4, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = Mat::from_vec(d, l, (0..d * l).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let f = ParamTensor::uniform("f", &[d, k], 1.0, &mut rng);
            prop_assert_eq!(halfconv_forward(&y, &f).unwrap().len(), l);
            prop_assert_eq!(maxpool_time(&y).0.cols, l);
        }

        #[test]
        fn maxpool_keeps_monotone_nonnegative_input(mut xs in proptest::collection::vec(0.0f64..10.0, 1..12)) {
            xs.sort_by(f64::total_cmp);
            let y = Mat::from_vec(1, xs.len(), xs.clone()).unwrap();
            prop_assert_eq!(maxpool_time(&y).0.data, xs);
        }
    }
}
