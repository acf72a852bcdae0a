//! Raw buffer kernels shared by [`Tensor`](super::Tensor) and the tape.

use crate::error::{Error, Result};

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, where `op(a)` is
/// `[m, k]` and `op(b)` is `[k, n]`. A transposed operand is stored as its transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n elements
    // whose lengths are asserted in debug builds and guaranteed by callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub p: usize,
    pub a_batched: bool,
    pub b_batched: bool,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, MatmulPlan)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Shape(format!("matmul needs rank >= 2, got {a:?} and {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, p) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::Shape(format!("matmul inner dims differ: {a:?} x {b:?}")));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let batch_shape = match (a_batch.is_empty(), b_batch.is_empty()) {
        (true, _) => b_batch.to_vec(),
        (false, true) => a_batch.to_vec(),
        (false, false) if a_batch == b_batch => a_batch.to_vec(),
        _ => {
            return Err(Error::Shape(format!("matmul batch dims differ: {a:?} x {b:?}")));
        }
    };
    let batch = batch_shape.iter().product::<usize>();
    let mut out = batch_shape;
    out.extend([m, p]);
    let plan = MatmulPlan {
        batch,
        m,
        k,
        p,
        a_batched: !a_batch.is_empty(),
        b_batched: !b_batch.is_empty(),
    };
    Ok((out, plan))
}

/// Forward product over all batch entries (`a_trans`/`b_trans` unused by callers today
/// but kept so the backward pass can share the loop).
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_gemm(
    plan: &MatmulPlan,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    a_trans: bool,
    b_trans: bool,
    alpha: f64,
    beta: f64,
) {
    let MatmulPlan { batch, m, k, p, a_batched, b_batched } = *plan;
    for i in 0..batch {
        let ai = if a_batched { &a[i * m * k..(i + 1) * m * k] } else { a };
        let bi = if b_batched { &b[i * k * p..(i + 1) * k * p] } else { b };
        gemm(m, k, p, alpha, ai, a_trans, bi, b_trans, beta, &mut c[i * m * p..(i + 1) * m * p]);
    }
}

/// Matmul backward: accumulates `dA += dY Bᵀ` and `dB += Aᵀ dY` into the given buffers.
pub(crate) fn matmul_backward(
    plan: &MatmulPlan,
    a: &[f64],
    b: &[f64],
    dy: &[f64],
    da: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let MatmulPlan { batch, m, k, p, a_batched, b_batched } = *plan;
    if let Some(da) = da {
        for i in 0..batch {
            let bi = if b_batched { &b[i * k * p..(i + 1) * k * p] } else { b };
            let dyi = &dy[i * m * p..(i + 1) * m * p];
            let dai = if a_batched { &mut da[i * m * k..(i + 1) * m * k] } else { &mut *da };
            gemm(m, p, k, 1.0, dyi, false, bi, true, 1.0, dai);
        }
    }
    if let Some(db) = db {
        for i in 0..batch {
            let ai = if a_batched { &a[i * m * k..(i + 1) * m * k] } else { a };
            let dyi = &dy[i * m * p..(i + 1) * m * p];
            let dbi = if b_batched { &mut db[i * k * p..(i + 1) * k * p] } else { &mut *db };
            gemm(k, m, p, 1.0, ai, true, dyi, false, 1.0, dbi);
        }
    }
}

pub const CONV_WIDTH: usize = 4;

/// Depthwise causal convolution: `y[l,d] = Σ_k kernel[d,k] · x[l-3+k, d]`, zero left padding.
pub fn causal_conv_forward(x: &[f64], kernel: &[f64], len: usize, channels: usize) -> Vec<f64> {
    let mut y = vec![0.0; len * channels];
    for l in 0..len {
        let out = &mut y[l * channels..(l + 1) * channels];
        for k in 0..CONV_WIDTH {
            let src = l as isize - (CONV_WIDTH as isize - 1) + k as isize;
            if src < 0 {
                continue;
            }
            let row = &x[src as usize * channels..(src as usize + 1) * channels];
            for d in 0..channels {
                out[d] += kernel[d * CONV_WIDTH + k] * row[d];
            }
        }
    }
    y
}

pub(crate) fn causal_conv_backward(
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    len: usize,
    channels: usize,
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
) {
    let mut dx = dx;
    let mut dk = dk;
    for l in 0..len {
        let g = &dy[l * channels..(l + 1) * channels];
        for k in 0..CONV_WIDTH {
            let src = l as isize - (CONV_WIDTH as isize - 1) + k as isize;
            if src < 0 {
                continue;
            }
            let src = src as usize;
            if let Some(dx) = dx.as_deref_mut() {
                for d in 0..channels {
                    dx[src * channels + d] += kernel[d * CONV_WIDTH + k] * g[d];
                }
            }
            if let Some(dk) = dk.as_deref_mut() {
                for d in 0..channels {
                    dk[d * CONV_WIDTH + k] += x[src * channels + d] * g[d];
                }
            }
        }
    }
}

/// Borrowed operands of a selective scan over `len` steps, `channels` inner
/// channels and `state` state entries per channel.
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a> {
    pub u: &'a [f64],
    pub delta: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub a: &'a [f64],
    pub d_skip: &'a [f64],
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

/// Runs the recurrence `h_l = exp(Δ_l A) h_{l-1} + Δ_l B_l u_l`, `y_l = <C_l, h_l> + D u_l`
/// with `h_0 = 0`. Returns `(y, states)` where `states` holds every `h_l` as `[len, channels, state]`.
pub fn selective_scan_forward(s: ScanInputs<'_>) -> (Vec<f64>, Vec<f64>) {
    let ScanInputs { u, delta, b, c, a, d_skip, len, channels, state } = s;
    let mut y = vec![0.0; len * channels];
    let mut states = vec![0.0; len * channels * state];
    let mut h = vec![0.0; channels * state];
    for l in 0..len {
        let bl = &b[l * state..(l + 1) * state];
        let cl = &c[l * state..(l + 1) * state];
        for d in 0..channels {
            let dt = delta[l * channels + d];
            let ul = u[l * channels + d];
            let du = dt * ul;
            let hd = &mut h[d * state..(d + 1) * state];
            let ad = &a[d * state..(d + 1) * state];
            let mut acc = 0.0;
            for n in 0..state {
                hd[n] = (dt * ad[n]).exp() * hd[n] + du * bl[n];
                acc += cl[n] * hd[n];
            }
            y[l * channels + d] = acc + d_skip[d] * ul;
        }
        states[l * channels * state..(l + 1) * channels * state].copy_from_slice(&h);
    }
    (y, states)
}

/// Gradients of the selective scan, accumulated into whichever outputs are present.
pub(crate) struct ScanGrads<'a> {
    pub du: Option<&'a mut [f64]>,
    pub ddelta: Option<&'a mut [f64]>,
    pub db: Option<&'a mut [f64]>,
    pub dc: Option<&'a mut [f64]>,
    pub da: Option<&'a mut [f64]>,
    pub dd: Option<&'a mut [f64]>,
}

pub(crate) fn selective_scan_backward(s: ScanInputs<'_>, states: &[f64], dy: &[f64], g: ScanGrads<'_>) {
    let ScanInputs { u, delta, b, c, a, d_skip, len, channels, state } = s;
    // Dense locals; copied into the optional outputs at the end.
    let mut du = vec![0.0; len * channels];
    let mut ddelta = vec![0.0; len * channels];
    let mut db = vec![0.0; len * state];
    let mut dc = vec![0.0; len * state];
    let mut da = vec![0.0; channels * state];
    let mut dd = vec![0.0; channels];
    // dh carries ∂loss/∂h_l flowing back from step l+1.
    let mut dh = vec![0.0; channels * state];
    for l in (0..len).rev() {
        let bl = &b[l * state..(l + 1) * state];
        let cl = &c[l * state..(l + 1) * state];
        let hl = &states[l * channels * state..(l + 1) * channels * state];
        let prev = if l > 0 { Some(&states[(l - 1) * channels * state..l * channels * state]) } else { None };
        for d in 0..channels {
            let idx = l * channels + d;
            let g_y = dy[idx];
            let dt = delta[idx];
            let ul = u[idx];
            dd[d] += g_y * ul;
            du[idx] += g_y * d_skip[d];
            let ad = &a[d * state..(d + 1) * state];
            let dhd = &mut dh[d * state..(d + 1) * state];
            let mut g_dt = 0.0;
            let mut g_u = 0.0;
            for n in 0..state {
                let h_here = hl[d * state + n];
                dc[l * state + n] += g_y * h_here;
                let gh = dhd[n] + g_y * cl[n];
                let decay = (dt * ad[n]).exp();
                let h_prev = prev.map_or(0.0, |p| p[d * state + n]);
                let g_decay = gh * h_prev * decay;
                g_dt += g_decay * ad[n] + gh * bl[n] * ul;
                da[d * state + n] += g_decay * dt;
                db[l * state + n] += gh * dt * ul;
                g_u += gh * dt * bl[n];
                dhd[n] = gh * decay;
            }
            ddelta[idx] += g_dt;
            du[idx] += g_u;
        }
    }
    fn add_into(dst: Option<&mut [f64]>, src: &[f64]) {
        if let Some(dst) = dst {
            dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
        }
    }
    add_into(g.du, &du);
    add_into(g.ddelta, &ddelta);
    add_into(g.db, &db);
    add_into(g.dc, &dc);
    add_into(g.da, &da);
    add_into(g.dd, &dd);
}
