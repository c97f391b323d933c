use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Format(format!(
                "tensor shape {shape:?} has a zero extent"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len().max(1)],
            data: if data.is_empty() { vec![0.0] } else { data },
        }
    }

    /// Builds an `[n × p]` matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * p);
        for row in rows {
            let row = row.as_ref();
            if row.len() != p {
                return Err(Error::shape("from_rows", &[p], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![n, p], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading extent, treating everything after it as one row.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Single-element value; errors unless the tensor holds exactly one entry.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, found shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Stacks equally shaped tensors along a new leading axis, flattening each one.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("cannot stack zero tensors".into()))?;
        let p = first.len();
        let mut data = Vec::with_capacity(items.len() * p);
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        Tensor::new(vec![items.len(), p], data)
    }
}

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(op, t.shape(), &[0, 0]));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `a[n×p] · b[p×q]`. Zero entries of `a` are skipped; images are mostly background.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, p) = as_matrix(a, "matmul")?;
    let (p2, q) = as_matrix(b, "matmul")?;
    if p != p2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; n * q];
    for i in 0..n {
        let arow = &a.data[i * p..(i + 1) * p];
        let orow = &mut out[i * q..(i + 1) * q];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[k * q..(k + 1) * q];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![n, q], out)
}

/// `aᵀ[p×n] · b[n×q]` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, p) = as_matrix(a, "matmul_tn")?;
    let (n2, q) = as_matrix(b, "matmul_tn")?;
    if n != n2 {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; p * q];
    for i in 0..n {
        let arow = &a.data[i * p..(i + 1) * p];
        let brow = &b.data[i * q..(i + 1) * q];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[k * q..(k + 1) * q];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![p, q], out)
}

/// `a[n×q] · bᵀ` where `b` is `[p×q]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, q) = as_matrix(a, "matmul_nt")?;
    let (p, q2) = as_matrix(b, "matmul_nt")?;
    if q != q2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        let arow = &a.data[i * q..(i + 1) * q];
        for k in 0..p {
            let brow = &b.data[k * q..(k + 1) * q];
            out[i * p + k] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![n, p], out)
}

/// `out[i,j] = Σ_k x[i,k]·w[k,j] + b[j]`.
pub fn affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, q) = as_matrix(w, "affine_forward")?;
    if b.len() != q || b.rank() != 1 {
        return Err(Error::shape("affine_forward", w.shape(), b.shape()));
    }
    if x.rank() != 2 || x.shape[1] != w.shape[0] {
        return Err(Error::shape("affine_forward", x.shape(), w.shape()));
    }
    let mut out = matmul(x, w)?;
    add_row_bias(&mut out, b);
    Ok(out)
}

pub(crate) fn add_row_bias(out: &mut Tensor, b: &Tensor) {
    let q = b.len();
    for row in out.data.chunks_mut(q) {
        for (o, &bv) in row.iter_mut().zip(&b.data) {
            *o += bv;
        }
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted `log Σ exp(z)`.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `−log softmax(logits)[label]`, clamped at zero against rounding.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Index {
            index: label,
            len: logits.len(),
        });
    }
    let top = argmax(logits);
    let m = logits[top];
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != top)
        .map(|(_, &v)| (v - m).exp())
        .sum();
    Ok(((m - logits[label]) + rest.ln_1p()).max(0.0))
}

pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn naive(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (n, p) = (x.shape()[0], x.shape()[1]);
        let q = w.shape()[1];
        let mut out = vec![0.0; n * q];
        for i in 0..n {
            for j in 0..q {
                let mut acc = 0.0;
                for k in 0..p {
                    acc += x.data()[i * p + k] * w.data()[k * q + j];
                }
                out[i * q + j] = acc + b.data()[j];
            }
        }
        out
    }

    #[test]
    fn affine_scalar_case() {
        let x = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let w = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let b = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert_eq!(affine_forward(&x, &w, &b).unwrap().data(), &[7.0]);
    }

    #[test]
    fn affine_identity() {
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let b = Tensor::zeros(&[3]);
        assert_eq!(affine_forward(&x, &w, &b).unwrap(), x);
    }

    #[test]
    fn affine_matches_triple_loop() {
        let mut rng = RngStream::new(11);
        let x = Tensor::new(vec![4, 3], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let w = Tensor::new(vec![3, 2], (0..6).map(|_| rng.normal()).collect()).unwrap();
        let b = Tensor::new(vec![2], (0..2).map(|_| rng.normal()).collect()).unwrap();
        let got = affine_forward(&x, &w, &b).unwrap();
        for (g, e) in got.data().iter().zip(naive(&x, &w, &b)) {
            assert!((g - e).abs() <= 1e-14, "{g} vs {e}");
        }
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 2]);
        let b = Tensor::zeros(&[2]);
        let msg = affine_forward(&x, &w, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let mut rng = RngStream::new(3);
        let a = Tensor::new(vec![5, 4], (0..20).map(|_| rng.normal()).collect()).unwrap();
        let b = Tensor::new(vec![5, 3], (0..15).map(|_| rng.normal()).collect()).unwrap();
        let tn = matmul_tn(&a, &b).unwrap();
        let mut at = Tensor::zeros(&[4, 5]);
        for i in 0..5 {
            for k in 0..4 {
                at.data_mut()[k * 5 + i] = a.data()[i * 4 + k];
            }
        }
        let direct = matmul(&at, &b).unwrap();
        for (x, y) in tn.data().iter().zip(direct.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        let c = Tensor::new(vec![3, 4], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let nt = matmul_nt(&a, &c).unwrap();
        assert_eq!(nt.shape(), &[5, 3]);
        let v: f64 = (0..4).map(|k| a.data()[4 + k] * c.data()[8 + k]).sum();
        assert!((nt.data()[5] - v).abs() < 1e-14);
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::vector(vec![-3.0, -0.5]);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let mut rng = RngStream::new(5);
        let r = Tensor::vector((0..50).map(|_| rng.normal()).collect());
        assert_eq!(relu(&relu(&r)), relu(&r));
    }

    #[test]
    fn cross_entropy_values() {
        let l = softmax_cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        // ln(1 + e^-20)
        let l = softmax_cross_entropy(&[10.0, -10.0], 0).unwrap();
        assert!((l - 2.061_153_620_314_381e-9).abs() < 1e-18, "{l}");
        // ln(e^1 + e^2 + e^3) − 3
        let l = softmax_cross_entropy(&[1.0, 2.0, 3.0], 2).unwrap();
        assert!((l - 0.407_605_964_444_380_1).abs() < 1e-12, "{l}");
        assert!(matches!(
            softmax_cross_entropy(&[1.0, 2.0], 2),
            Err(Error::Index { index: 2, len: 2 })
        ));
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let mut rng = RngStream::new(8);
        for _ in 0..50 {
            let z: Vec<f64> = (0..6).map(|_| 5.0 * rng.normal()).collect();
            let c = 100.0 * rng.normal();
            let p = softmax(&z);
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            for (a, b) in p.iter().zip(softmax(&shifted)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }
}
