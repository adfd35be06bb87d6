//! Forward kernels on plain tensors. The tape reuses these for node values,
//! so the eager inference path and the differentiable path share arithmetic.

use super::{sum, Real, Tensor};
use crate::error::{Error, Result};

pub const RMSNORM_EPS: f64 = 1e-6;

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dim2("matmul")?;
    let (k2, n) = b.dim2("matmul")?;
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_bt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dim2("matmul_bt")?;
    let (n, k2) = b.dim2("matmul_bt")?;
    if k != k2 {
        return Err(Error::dim(
            "matmul_bt",
            format!("cannot multiply {:?} by transpose of {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            out.push(dot(ar, b.row(j)));
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dim2("transpose")?;
    let d = a.data();
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(d[i * n + j]);
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Row-wise softmax of `scale · scores` where entry `(r, c)` is visible only
/// if `key_positions[c] <= query_positions[r]`. Masked entries are exactly 0.
pub fn masked_softmax<T: Real>(
    scores: &Tensor<T>,
    scale: T,
    query_positions: &[usize],
    key_positions: &[usize],
) -> Result<Tensor<T>> {
    let (r, c) = scores.dim2("masked_softmax")?;
    if query_positions.len() != r || key_positions.len() != c {
        return Err(Error::dim(
            "masked_softmax",
            format!(
                "scores {:?} vs {} query and {} key positions",
                scores.shape(),
                query_positions.len(),
                key_positions.len()
            ),
        ));
    }
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        let qp = query_positions[i];
        let row = scores.row(i);
        let max = key_positions
            .iter()
            .zip(row)
            .filter(|&(&kp, _)| kp <= qp)
            .map(|(_, &x)| x * scale)
            .reduce(T::max)
            .ok_or_else(|| Error::Input(format!("query at position {qp} sees no keys")))?;
        let orow = &mut out[i * c..(i + 1) * c];
        let mut total = T::zero();
        for (j, &kp) in key_positions.iter().enumerate() {
            if kp <= qp {
                let e = (row[j] * scale - max).exp();
                orow[j] = e;
                total += e;
            }
        }
        for o in orow.iter_mut() {
            *o = *o / total;
        }
    }
    Ok(Tensor::from_parts(vec![r, c], out))
}

/// Causal softmax over a square score matrix; row `r` normalises columns `0..=r`.
pub fn softmax_causal<T: Real>(scores: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    let (r, c) = scores.dim2("softmax_causal")?;
    if r != c {
        return Err(Error::dim(
            "softmax_causal",
            format!("score matrix must be square, got {:?}", scores.shape()),
        ));
    }
    if scale <= T::zero() {
        return Err(Error::Input("softmax scale must be positive".into()));
    }
    let pos: Vec<usize> = (0..r).collect();
    masked_softmax(scores, scale, &pos, &pos)
}

/// RMS normalisation over the last axis followed by an elementwise gain.
pub fn rmsnorm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if gain.numel() != d || gain.ndim() != 1 {
        return Err(Error::dim(
            "rmsnorm",
            format!("input {:?} with gain {:?}", x.shape(), gain.shape()),
        ));
    }
    let eps = T::of(RMSNORM_EPS);
    let dt = T::of(d as f64);
    let g = gain.data();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d) {
        let ms = sum(row.iter().map(|&v| v * v)) / dt;
        let inv = (ms + eps).sqrt().recip();
        out.extend(row.iter().zip(g).map(|(&v, &gj)| v * inv * gj));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// Splits the last axis into a gate half and a value half and returns
/// `silu(gate) ⊙ value`.
pub fn swiglu<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let two_h = x.last_dim();
    if !two_h.is_multiple_of(2) {
        return Err(Error::dim(
            "swiglu",
            format!("last extent {two_h} is odd"),
        ));
    }
    let h = two_h / 2;
    let mut out = Vec::with_capacity(x.numel() / 2);
    for row in x.data().chunks(two_h) {
        let (gate, value) = row.split_at(h);
        out.extend(gate.iter().zip(value).map(|(&g, &v)| silu(g) * v));
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = h;
    Ok(Tensor::from_parts(shape, out))
}

/// Multiplies every last-axis vector elementwise by `w`.
pub fn mul_last<T: Real>(x: &Tensor<T>, w: &[T]) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if w.len() != d {
        return Err(Error::dim(
            "mul_last",
            format!("input {:?} with weight of length {}", x.shape(), w.len()),
        ));
    }
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d) {
        out.extend(row.iter().zip(w).map(|(&a, &b)| a * b));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Numerically stable `log softmax` along the last axis.
pub fn log_softmax<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.last_dim();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d) {
        let max = row.iter().copied().reduce(T::max).unwrap_or_default();
        let lse = sum(row.iter().map(|&v| (v - max).exp())).ln() + max;
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Gathers rows of a `[n × d]` table.
pub fn gather_rows<T: Real>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (n, d) = table.dim2("gather_rows")?;
    if ids.is_empty() {
        return Err(Error::Input("no ids to gather".into()));
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= n {
            return Err(Error::Input(format!("id {id} outside table of {n} rows")));
        }
        out.extend_from_slice(table.row(id));
    }
    Ok(Tensor::from_parts(vec![ids.len(), d], out))
}

/// `[s × H·D]` → `[H × s × D]`.
pub fn split_heads<T: Real>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (s, hd) = x.dim2("split_heads")?;
    if heads == 0 || hd % heads != 0 {
        return Err(Error::dim(
            "split_heads",
            format!("width {hd} not divisible into {heads} heads"),
        ));
    }
    let d = hd / heads;
    let mut out = Vec::with_capacity(x.numel());
    for h in 0..heads {
        for t in 0..s {
            out.extend_from_slice(&x.row(t)[h * d..(h + 1) * d]);
        }
    }
    Ok(Tensor::from_parts(vec![heads, s, d], out))
}

/// `[H × s × D]` → `[s × H·D]`.
pub fn merge_heads<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, s, d) = x.dim3("merge_heads")?;
    let xd = x.data();
    let mut out = Vec::with_capacity(x.numel());
    for t in 0..s {
        for head in 0..h {
            let off = (head * s + t) * d;
            out.extend_from_slice(&xd[off..off + d]);
        }
    }
    Ok(Tensor::from_parts(vec![s, h * d], out))
}

/// Slice `[s × D]` of head `h` from `[H × s × D]`.
pub fn head<T: Real>(x: &Tensor<T>, h: usize) -> Result<Tensor<T>> {
    let (heads, s, d) = x.dim3("head")?;
    if h >= heads {
        return Err(Error::dim("head", format!("head {h} of {heads}")));
    }
    let off = h * s * d;
    Ok(Tensor::from_parts(vec![s, d], x.data()[off..off + s * d].to_vec()))
}

/// Stacks equally shaped `[s × D]` tensors into `[H × s × D]`.
pub fn stack<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("stack", "nothing to stack"))?;
    let mut data = Vec::with_capacity(first.numel() * parts.len());
    for p in parts {
        first.same_shape(p, "stack")?;
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::from_parts(shape, data))
}

/// Concatenates along the second-to-last axis of rank-3 tensors
/// (`[H × s₁ × D]`, `[H × s₂ × D]` → `[H × (s₁+s₂) × D]`).
pub fn concat_seq<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, s1, d) = a.dim3("concat_seq")?;
    let (h2, s2, d2) = b.dim3("concat_seq")?;
    if h != h2 || d != d2 {
        return Err(Error::dim(
            "concat_seq",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for head in 0..h {
        out.extend_from_slice(&a.data()[head * s1 * d..(head + 1) * s1 * d]);
        out.extend_from_slice(&b.data()[head * s2 * d..(head + 1) * s2 * d]);
    }
    Ok(Tensor::from_parts(vec![h, s1 + s2, d], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let x = m(&[&[1.5, -2.0], &[0.25, 4.0]]);
        let eye = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(matmul(&eye, &x).unwrap(), x);
        let c = matmul(&m(&[&[1.0, 2.0]]), &m(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros([2, 3]), &Tensor::zeros([2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_bt_matches_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn([3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn([5, 4], 1.0, &mut rng);
        let lhs = matmul_bt(&a, &b).unwrap();
        let rhs = matmul(&a, &transpose(&b).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-14);
    }

    #[test]
    fn softmax_single_token() {
        let p = softmax_causal(&Tensor::scalar(3.7).reshape([1, 1]).unwrap(), 0.5).unwrap();
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn softmax_equal_scores_row_three() {
        let p = softmax_causal(&Tensor::<f64>::full([5, 5], 0.3), 1.0).unwrap();
        assert_eq!(&p.row(3)[..4], &[0.25; 4]);
        assert_eq!(p.row(3)[4], 0.0);
    }

    #[test]
    fn softmax_random_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = Tensor::<f64>::randn([6, 6], 2.0, &mut rng);
        let p = softmax_causal(&s, 1.0 / 8f64.sqrt()).unwrap();
        for r in 0..6 {
            let row = p.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[r + 1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn softmax_rejects_non_square() {
        assert!(softmax_causal(&Tensor::<f64>::zeros([2, 3]), 1.0).is_err());
    }

    #[test]
    fn rmsnorm_edge_cases() {
        let z = rmsnorm(&Tensor::<f64>::zeros([2, 4]), &Tensor::ones([4])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let o = rmsnorm(&Tensor::<f64>::ones([1, 4]), &Tensor::ones([4])).unwrap();
        assert!(o.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        assert!(rmsnorm(&Tensor::<f64>::ones([1, 4]), &Tensor::ones([3])).is_err());
    }

    #[test]
    fn rmsnorm_output_has_unit_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn([3, 8], 1.5, &mut rng);
        let g = Tensor::<f64>::from_fn([8], |i| 0.5 + i as f64);
        let y = rmsnorm(&x, &g).unwrap();
        for r in 0..3 {
            let ms: f64 = y.row(r).iter().zip(g.data()).map(|(v, gj)| (v / gj).powi(2)).sum::<f64>() / 8.0;
            assert!((ms.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn swiglu_limits() {
        let x = Tensor::<f64>::new(vec![1, 4], vec![0.0, 0.0, 3.0, -2.0]).unwrap();
        assert_eq!(swiglu(&x).unwrap().data(), &[0.0, 0.0]);
        let x = Tensor::<f64>::new(vec![1, 4], vec![20.0, 20.0, 3.0, -2.0]).unwrap();
        let y = swiglu(&x).unwrap();
        assert!((y.data()[0] - 60.0).abs() < 1e-6 && (y.data()[1] + 40.0).abs() < 1e-6);
        assert!(swiglu(&Tensor::<f64>::zeros([2, 3])).is_err());
    }

    #[test]
    fn head_split_merge_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn([5, 12], 1.0, &mut rng);
        let h = split_heads(&x, 3).unwrap();
        assert_eq!(h.shape(), &[3, 5, 4]);
        assert_eq!(merge_heads(&h).unwrap(), x);
    }
}
