use super::Tensor;
use crate::error::{Error, Result};

/// Norms at or below this are treated as zero by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Matrix product. A rank-1 right operand is treated as a column vector and
/// the result is returned as rank 1.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n, vector_rhs) = match b.shape() {
        &[k2] => (k2, 1, true),
        &[k2, n] => (k2, n, false),
        other => return Err(Error::dim("matmul", a.shape(), other)),
    };
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    if vector_rhs {
        Ok(Tensor::vector(out))
    } else {
        Tensor::new(vec![m, n], out)
    }
}

pub(crate) fn conv_dims(x: &[usize], k: &[usize], stride: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let (c_in, len) = match x {
        &[c, l] => (c, l),
        other => return Err(Error::dim("conv1d", other, k)),
    };
    let (c_out, kc, w) = match k {
        &[o, c, w] => (o, c, w),
        other => return Err(Error::dim("conv1d", x, other)),
    };
    if kc != c_in || stride == 0 {
        return Err(Error::dim("conv1d", x, k));
    }
    if w > len {
        return Err(Error::dim("conv1d", x, k));
    }
    let l_out = (len - w) / stride + 1;
    Ok((c_in, len, c_out, w, l_out))
}

/// Valid (unpadded) cross-correlation: `x` is `c_in × L`, `kernel` is
/// `c_out × c_in × w`, result is `c_out × (⌊(L−w)/stride⌋+1)`.
pub fn conv1d(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let (c_in, len, c_out, w, l_out) = conv_dims(x.shape(), kernel.shape(), stride)?;
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0; c_out * l_out];
    for o in 0..c_out {
        let orow = &mut out[o * l_out..(o + 1) * l_out];
        for c in 0..c_in {
            let krow = &kd[(o * c_in + c) * w..(o * c_in + c + 1) * w];
            let xrow = &xd[c * len..(c + 1) * len];
            for (t, acc) in orow.iter_mut().enumerate() {
                let window = &xrow[t * stride..t * stride + w];
                let mut s = 0.0;
                for (kv, xv) in krow.iter().zip(window) {
                    s += kv * xv;
                }
                *acc += s;
            }
        }
    }
    Tensor::new(vec![c_out, l_out], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Mean over the length axis of a `c × L` tensor.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (c, len) = x.dims2()?;
    let out = (0..c)
        .map(|i| x.data()[i * len..(i + 1) * len].iter().sum::<f64>() / len as f64)
        .collect();
    Ok(Tensor::vector(out))
}

/// Adds `bias[i]` to every element of channel `i` of a `c × L` or `c` tensor.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.shape()[0];
    if bias.shape() != [c] {
        return Err(Error::dim("add_channel_bias", x.shape(), bias.shape()));
    }
    let inner = x.len() / c;
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let b = bias.data()[i];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

/// Unit-L2 normalisation along the last axis: a vector as a whole, a matrix
/// row by row.
pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    let inner = *v.shape().last().expect("tensor has a shape");
    let mut out = v.clone();
    for row in out.data_mut().chunks_mut(inner) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > NORM_EPS) {
            return Err(Error::Degenerate(format!("l2_normalize of a vector with norm {n:e}")));
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    Ok(out)
}
