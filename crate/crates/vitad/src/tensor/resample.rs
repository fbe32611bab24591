use super::{Real, Tensor, TensorError, TensorResult};

/// Splits `[.., H, W]` into a plane count and the plane extents.
fn planes<T: Real>(t: &Tensor<T>, op: &'static str) -> TensorResult<(usize, usize, usize)> {
    match t.shape() {
        &[h, w] => Ok((1, h, w)),
        &[c, h, w] => Ok((c, h, w)),
        s => Err(TensorError::Contract(format!("{op} expects [H, W] or [C, H, W], got {s:?}"))),
    }
}

fn with_plane_shape<T: Real>(t: &Tensor<T>, oh: usize, ow: usize, data: Vec<T>) -> TensorResult<Tensor<T>> {
    let mut shape = t.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Tensor::new(shape, data)
}

/// Source coordinate and blend weight for half-pixel-centred sampling.
fn taps(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling of the trailing two dimensions with corner alignment
/// off. Equal sizes return the input unchanged.
pub fn resize_bilinear<T: Real>(t: &Tensor<T>, oh: usize, ow: usize) -> TensorResult<Tensor<T>> {
    let (c, h, w) = planes(t, "resize_bilinear")?;
    if oh == 0 || ow == 0 {
        return Err(TensorError::Contract("resize to an empty size".into()));
    }
    if (oh, ow) == (h, w) {
        return Ok(t.clone());
    }
    let (ty, tx) = (taps(oh, h), taps(ow, w));
    let mut out = Vec::with_capacity(c * oh * ow);
    for plane in t.data().chunks_exact(h * w) {
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                let at = |y: usize, x: usize| plane[y * w + x].as_f64();
                let top = at(y0, x0) * (1.0 - lx) + at(y0, x1) * lx;
                let bottom = at(y1, x0) * (1.0 - lx) + at(y1, x1) * lx;
                out.push(T::lit(top * (1.0 - ly) + bottom * ly));
            }
        }
    }
    with_plane_shape(t, oh, ow, out)
}

/// Nearest-neighbour resampling of the trailing two dimensions.
pub fn resize_nearest<T: Real>(t: &Tensor<T>, oh: usize, ow: usize) -> TensorResult<Tensor<T>> {
    let (c, h, w) = planes(t, "resize_nearest")?;
    if oh == 0 || ow == 0 {
        return Err(TensorError::Contract("resize to an empty size".into()));
    }
    let ys: Vec<usize> = (0..oh).map(|d| (d * h / oh).min(h - 1)).collect();
    let xs: Vec<usize> = (0..ow).map(|d| (d * w / ow).min(w - 1)).collect();
    let mut out = Vec::with_capacity(c * oh * ow);
    for plane in t.data().chunks_exact(h * w) {
        for &y in &ys {
            out.extend(xs.iter().map(|&x| plane[y * w + x]));
        }
    }
    with_plane_shape(t, oh, ow, out)
}
