//! Small dense kernels. Weights are stored `[in, out]` so that the forward
//! pass and the weight gradient are row-wise axpy updates.
//!
//! Each output element accumulates over its reduction index in a fixed order
//! that does not depend on the number of rows, so a row's result is the same
//! whichever batch it sits in.

/// `y[r, :] = bias + x[r, :] · w` for a `[rows, n_in]` input and `[n_in, n_out]` weights.
pub fn affine_forward(x: &[f64], rows: usize, n_in: usize, w: &[f64], bias: &[f64], y: &mut [f64]) {
    let n_out = bias.len();
    debug_assert_eq!(x.len(), rows * n_in);
    debug_assert_eq!(w.len(), n_in * n_out);
    debug_assert_eq!(y.len(), rows * n_out);
    for r in 0..rows {
        let yr = &mut y[r * n_out..(r + 1) * n_out];
        yr.copy_from_slice(bias);
        let xr = &x[r * n_in..(r + 1) * n_in];
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wk = &w[k * n_out..(k + 1) * n_out];
            for (yo, &wo) in yr.iter_mut().zip(wk) {
                *yo += xv * wo;
            }
        }
    }
}

/// Accumulates `dw += xᵀ · dy` and `db += Σ_r dy[r, :]`.
pub fn affine_param_grad(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    n_in: usize,
    n_out: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    for r in 0..rows {
        let dyr = &dy[r * n_out..(r + 1) * n_out];
        for (b, &g) in db.iter_mut().zip(dyr) {
            *b += g;
        }
        let xr = &x[r * n_in..(r + 1) * n_in];
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let dwk = &mut dw[k * n_out..(k + 1) * n_out];
            for (d, &g) in dwk.iter_mut().zip(dyr) {
                *d += xv * g;
            }
        }
    }
}

/// `dx[r, k] = Σ_o dy[r, o] · w[k, o]`.
pub fn affine_input_grad(
    dy: &[f64],
    rows: usize,
    n_in: usize,
    n_out: usize,
    w: &[f64],
    dx: &mut [f64],
) {
    for r in 0..rows {
        let dyr = &dy[r * n_out..(r + 1) * n_out];
        let dxr = &mut dx[r * n_in..(r + 1) * n_in];
        for (k, d) in dxr.iter_mut().enumerate() {
            *d = dot(dyr, &w[k * n_out..(k + 1) * n_out]);
        }
    }
}

/// Dot product with four fixed accumulator lanes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
