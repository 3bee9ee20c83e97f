//! Independent reference implementations used as test oracles. Nothing here
//! calls the library's numeric kernels.
#![allow(dead_code)]

/// Straightforward six-loop convolution over NCHW input and OIHW weights.
pub fn naive_conv2d(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    wt: &[f64],
    [oc, ic, kh, kw]: [usize; 4],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    assert_eq!(c, ic);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * oc * oh * ow];
    for b in 0..n {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for i in 0..ic {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                let xv = x[((b * c + i) * h + iy as usize) * w + ix as usize];
                                s += xv * wt[((o * ic + i) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * oc + o) * oh + oy) * ow + ox] = s + bias[o];
                }
            }
        }
    }
    (out, [n, oc, oh, ow])
}

pub fn naive_maxpool(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    k: usize,
    stride: usize,
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..k {
                    for dx in 0..k {
                        m = m.max(x[plane * h * w + (oy * stride + dy) * w + ox * stride + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    (out, [n, c, oh, ow])
}

/// `y = x W^T + b` for row-major `x: [n, fin]`, `W: [fout, fin]`.
pub fn naive_linear(
    x: &[f64],
    n: usize,
    fin: usize,
    wt: &[f64],
    fout: usize,
    bias: &[f64],
) -> Vec<f64> {
    let mut y = vec![0.0; n * fout];
    for i in 0..n {
        for o in 0..fout {
            y[i * fout + o] = (0..fin)
                .map(|k| x[i * fin + k] * wt[o * fin + k])
                .sum::<f64>()
                + bias[o];
        }
    }
    y
}

pub fn relu(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// The default moving-grid neighbourhood written out cell by cell: the 5x5
/// window without its centre and four corners.
#[rustfmt::skip]
pub const MASK_20: [(i64, i64); 20] = [
    (-2, -1), (-2, 0), (-2, 1),
    (-1, -2), (-1, -1), (-1, 0), (-1, 1), (-1, 2),
    (0, -2), (0, -1), (0, 1), (0, 2),
    (1, -2), (1, -1), (1, 0), (1, 1), (1, 2),
    (2, -1), (2, 0), (2, 1),
];

pub struct BruteAdjust {
    pub b: f64,
    pub moving_mean: Vec<Option<f64>>,
    pub adjusted: Vec<Option<f64>>,
}

/// Moving-grid adjustment of a row-major `n_range x n_pass` grid with
/// optional values, using the explicit 20-cell mask.
pub fn brute_force_adjust(n_range: usize, n_pass: usize, values: &[Option<f64>]) -> BruteAdjust {
    let at = |r: i64, p: i64| -> Option<f64> {
        if r < 0 || p < 0 || r >= n_range as i64 || p >= n_pass as i64 {
            None
        } else {
            values[r as usize * n_pass + p as usize]
        }
    };
    let mut moving_mean = Vec::with_capacity(values.len());
    for r in 0..n_range as i64 {
        for p in 0..n_pass as i64 {
            let nb: Vec<f64> = MASK_20
                .iter()
                .filter_map(|(dr, dp)| at(r + dr, p + dp))
                .collect();
            moving_mean.push((!nb.is_empty()).then(|| nb.iter().sum::<f64>() / nb.len() as f64));
        }
    }
    let pairs: Vec<(f64, f64)> = values
        .iter()
        .zip(&moving_mean)
        .filter_map(|(v, m)| Some(((*m)?, (*v)?)))
        .collect();
    let k = pairs.len() as f64;
    let xbar = pairs.iter().map(|p| p.0).sum::<f64>() / k;
    let ybar = pairs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pairs.iter().map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let sxx: f64 = pairs.iter().map(|(x, _)| (x - xbar).powi(2)).sum();
    let b = sxy / sxx;
    let adjusted = values
        .iter()
        .zip(&moving_mean)
        .map(|(v, m)| Some((*v)? - b * ((*m)? - xbar)))
        .collect();
    BruteAdjust {
        b,
        moving_mean,
        adjusted,
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors (Euclidean norms).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Ids ordered by descending value, ties by ascending id.
pub fn ranking(values: &[(String, f64)]) -> Vec<String> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.into_iter().map(|(id, _)| id).collect()
}
