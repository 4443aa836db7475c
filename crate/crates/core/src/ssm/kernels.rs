//! Array-level selective-SSM kernels: zero-order-hold discretisation and the
//! linear recurrence `h_t = Ā_t h_{t-1} + B̄_t x_t`, `y_t = C_t h_t`.
//!
//! Layouts: `delta`/`x`/`y` are `[B, L, D]`, `a` is `[D, N]`, `b_sel`/`c` are
//! `[B, L, N]`, and the discretised `abar`/`bbar` are `[B, L, D, N]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this `|Δ·A|` the ZOH input factor switches to its series limit.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-8;

pub const DEFAULT_CHUNK: usize = 64;

/// `(exp(z) - 1) / z`, the ZOH input factor.
#[inline]
pub fn zoh_factor(z: f64) -> f64 {
    if z.abs() < ZOH_SERIES_THRESHOLD {
        1.0 + 0.5 * z
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`zoh_factor`].
#[inline]
pub fn zoh_factor_deriv(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        // 1/2 + z/3 + z²/8 + z³/30 + z⁴/144
        0.5 + z * (1.0 / 3.0 + z * (0.125 + z * (1.0 / 30.0 + z / 144.0)))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// One step of the recurrence viewed as the affine map `h ↦ decay·h + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanPair {
    pub decay: f64,
    pub offset: f64,
}

impl ScanPair {
    pub const IDENTITY: ScanPair = ScanPair {
        decay: 1.0,
        offset: 0.0,
    };

    /// Applies `self` first, then `next`.
    #[inline]
    pub fn then(self, next: ScanPair) -> ScanPair {
        ScanPair {
            decay: self.decay * next.decay,
            offset: next.decay * self.offset + next.offset,
        }
    }

    #[inline]
    pub fn apply(self, h: f64) -> f64 {
        self.decay * h + self.offset
    }
}

/// Discretised per-step system. `c` is carried along since the readout is
/// input-dependent as well.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizedSystem {
    pub abar: Tensor,
    pub bbar: Tensor,
    pub c: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Dims {
    pub b: usize,
    pub l: usize,
    pub d: usize,
    pub n: usize,
}

fn dims3(t: &Tensor, op: &'static str) -> Result<[usize; 3]> {
    match t.shape() {
        &[a, b, c] => Ok([a, b, c]),
        s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("{op} expects a rank-3 tensor"),
        }),
    }
}

pub(crate) fn zoh_dims(delta: &Tensor, a: &Tensor) -> Result<Dims> {
    let [b, l, d] = dims3(delta, "discretize")?;
    match a.shape() {
        &[da, n] if da == d => Ok(Dims { b, l, d, n }),
        s => Err(Error::shape("discretize", delta.shape(), s)),
    }
}

fn check_positive_steps(delta: &Tensor) -> Result<()> {
    if let Some(v) = delta.data().iter().find(|&&v| v <= 0.0) {
        return Err(Error::Domain(format!("step size Δ must be positive, got {v}")));
    }
    Ok(())
}

/// `Ā[b,l,d,n] = exp(Δ[b,l,d] · A[d,n])`.
pub fn zoh_decay(delta: &Tensor, a: &Tensor) -> Result<Tensor> {
    let dims = zoh_dims(delta, a)?;
    check_positive_steps(delta)?;
    let Dims { b, l, d, n } = dims;
    let (dt, av) = (delta.data(), a.data());
    let mut out = Vec::with_capacity(b * l * d * n);
    for row in 0..b * l {
        for di in 0..d {
            let step = dt[row * d + di];
            out.extend(av[di * n..(di + 1) * n].iter().map(|&ai| (step * ai).exp()));
        }
    }
    Ok(Tensor::from_raw(vec![b, l, d, n], out))
}

/// `B̄[b,l,d,n] = (exp(Δ·A) − 1)/(Δ·A) · Δ · B_sel[b,l,n]`.
pub fn zoh_input(delta: &Tensor, a: &Tensor, b_sel: &Tensor) -> Result<Tensor> {
    let dims = zoh_dims(delta, a)?;
    check_positive_steps(delta)?;
    let Dims { b, l, d, n } = dims;
    if b_sel.shape() != [b, l, n] {
        return Err(Error::shape("discretize", &[b, l, n], b_sel.shape()));
    }
    let (dt, av, bv) = (delta.data(), a.data(), b_sel.data());
    let mut out = Vec::with_capacity(b * l * d * n);
    for row in 0..b * l {
        let bs = &bv[row * n..(row + 1) * n];
        for di in 0..d {
            let step = dt[row * d + di];
            let arow = &av[di * n..(di + 1) * n];
            out.extend(
                arow.iter()
                    .zip(bs)
                    .map(|(&ai, &bi)| zoh_factor(step * ai) * step * bi),
            );
        }
    }
    Ok(Tensor::from_raw(vec![b, l, d, n], out))
}

pub fn discretize(
    delta: &Tensor,
    a: &Tensor,
    b_sel: &Tensor,
    c_sel: &Tensor,
) -> Result<DiscretizedSystem> {
    let abar = zoh_decay(delta, a)?;
    let bbar = zoh_input(delta, a, b_sel)?;
    if c_sel.shape() != b_sel.shape() {
        return Err(Error::shape("discretize", b_sel.shape(), c_sel.shape()));
    }
    Ok(DiscretizedSystem {
        abar,
        bbar,
        c: c_sel.clone(),
    })
}

pub(crate) fn scan_dims(abar: &Tensor, bbar: &Tensor, c: &Tensor, x: &Tensor) -> Result<Dims> {
    let (b, l, d, n) = match abar.shape() {
        &[b, l, d, n] => (b, l, d, n),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "scan expects Ā of rank 4".into(),
            })
        }
    };
    if bbar.shape() != abar.shape() {
        return Err(Error::shape("scan", abar.shape(), bbar.shape()));
    }
    if c.shape() != [b, l, n] {
        return Err(Error::shape("scan", &[b, l, n], c.shape()));
    }
    if x.shape() != [b, l, d] {
        return Err(Error::shape("scan", &[b, l, d], x.shape()));
    }
    Ok(Dims { b, l, d, n })
}

/// Reference recurrence from `h₀ = 0`, one step at a time.
pub fn scan_sequential(sys: &DiscretizedSystem, x: &Tensor) -> Result<Tensor> {
    let dims = scan_dims(&sys.abar, &sys.bbar, &sys.c, x)?;
    Ok(sequential_raw(dims, sys.abar.data(), sys.bbar.data(), sys.c.data(), x.data(), None))
}

/// Runs the recurrence; when `states` is given, every `h_t` is written to it
/// (layout `[B, L, D, N]`).
pub(crate) fn sequential_raw(
    dims: Dims,
    abar: &[f64],
    bbar: &[f64],
    c: &[f64],
    x: &[f64],
    mut states: Option<&mut [f64]>,
) -> Tensor {
    let Dims { b, l, d, n } = dims;
    let mut y = vec![0.0; b * l * d];
    let mut h = vec![0.0; d * n];
    for bi in 0..b {
        h.fill(0.0);
        for t in 0..l {
            let row = bi * l + t;
            let base = row * d * n;
            let cs = &c[row * n..(row + 1) * n];
            for di in 0..d {
                let xv = x[row * d + di];
                let hs = &mut h[di * n..(di + 1) * n];
                let a = &abar[base + di * n..base + (di + 1) * n];
                let bb = &bbar[base + di * n..base + (di + 1) * n];
                let mut acc = 0.0;
                for k in 0..n {
                    hs[k] = a[k] * hs[k] + bb[k] * xv;
                    acc += cs[k] * hs[k];
                }
                y[row * d + di] = acc;
            }
            if let Some(st) = states.as_deref_mut() {
                st[row * d * n..(row + 1) * d * n].copy_from_slice(&h);
            }
        }
    }
    Tensor::from_raw(vec![b, l, d], y)
}

/// Chunked evaluation of the same recurrence.
///
/// Each chunk is first reduced to one affine map per `(d, n)` lane, chunk
/// boundary states are obtained by composing those maps, and every chunk is
/// then replayed from its exact incoming state. The per-chunk passes are
/// independent of each other; only the boundary composition is serial.
pub fn scan_chunked(sys: &DiscretizedSystem, x: &Tensor, chunk: usize) -> Result<Tensor> {
    if chunk == 0 {
        return Err(Error::Domain("chunk size must be at least 1".into()));
    }
    let dims = scan_dims(&sys.abar, &sys.bbar, &sys.c, x)?;
    if chunk >= dims.l {
        return Ok(sequential_raw(dims, sys.abar.data(), sys.bbar.data(), sys.c.data(), x.data(), None));
    }
    Ok(chunked_raw(dims, sys.abar.data(), sys.bbar.data(), sys.c.data(), x.data(), chunk))
}

pub(crate) fn chunked_raw(
    dims: Dims,
    abar: &[f64],
    bbar: &[f64],
    c: &[f64],
    x: &[f64],
    chunk: usize,
) -> Tensor {
    let Dims { b, l, d, n } = dims;
    let lanes = d * n;
    let n_chunks = l.div_ceil(chunk);
    let mut y = vec![0.0; b * l * d];
    let mut decay = vec![0.0; n_chunks * lanes];
    let mut offset = vec![0.0; n_chunks * lanes];
    let mut carry = vec![0.0; n_chunks * lanes];
    let mut h = vec![0.0; lanes];
    for bi in 0..b {
        // pass 1: chunk summaries
        for ci in 0..n_chunks {
            let dec = &mut decay[ci * lanes..(ci + 1) * lanes];
            let off = &mut offset[ci * lanes..(ci + 1) * lanes];
            dec.fill(1.0);
            off.fill(0.0);
            for t in ci * chunk..((ci + 1) * chunk).min(l) {
                let row = bi * l + t;
                let base = row * lanes;
                for di in 0..d {
                    let xv = x[row * d + di];
                    for k in di * n..(di + 1) * n {
                        let a = abar[base + k];
                        dec[k] *= a;
                        off[k] = a * off[k] + bbar[base + k] * xv;
                    }
                }
            }
        }
        // pass 2: boundary states, carry[ci] is the state entering chunk ci
        carry[..lanes].fill(0.0);
        for ci in 1..n_chunks {
            let (done, rest) = carry.split_at_mut(ci * lanes);
            let prev = &done[(ci - 1) * lanes..];
            let cur = &mut rest[..lanes];
            let p = ci - 1;
            for k in 0..lanes {
                let pair = ScanPair {
                    decay: decay[p * lanes + k],
                    offset: offset[p * lanes + k],
                };
                cur[k] = pair.apply(prev[k]);
            }
        }
        // pass 3: replay each chunk from its incoming state
        for ci in 0..n_chunks {
            h.copy_from_slice(&carry[ci * lanes..(ci + 1) * lanes]);
            for t in ci * chunk..((ci + 1) * chunk).min(l) {
                let row = bi * l + t;
                let base = row * lanes;
                let cs = &c[row * n..(row + 1) * n];
                for di in 0..d {
                    let xv = x[row * d + di];
                    let mut acc = 0.0;
                    for k in 0..n {
                        let j = di * n + k;
                        h[j] = abar[base + j] * h[j] + bbar[base + j] * xv;
                        acc += cs[k] * h[j];
                    }
                    y[row * d + di] = acc;
                }
            }
        }
    }
    Tensor::from_raw(vec![b, l, d], y)
}

pub(crate) struct ScanGrads {
    pub abar: Vec<f64>,
    pub bbar: Vec<f64>,
    pub c: Vec<f64>,
    pub x: Vec<f64>,
}

/// Reverse-mode sweep through the recurrence given `dL/dy`.
pub(crate) fn scan_backward(
    dims: Dims,
    abar: &[f64],
    bbar: &[f64],
    c: &[f64],
    x: &[f64],
    dy: &[f64],
) -> ScanGrads {
    let Dims { b, l, d, n } = dims;
    let lanes = d * n;
    let mut states = vec![0.0; b * l * lanes];
    sequential_raw(dims, abar, bbar, c, x, Some(&mut states));

    let mut g = ScanGrads {
        abar: vec![0.0; abar.len()],
        bbar: vec![0.0; bbar.len()],
        c: vec![0.0; c.len()],
        x: vec![0.0; x.len()],
    };
    let mut dh = vec![0.0; lanes];
    for bi in 0..b {
        dh.fill(0.0);
        for t in (0..l).rev() {
            let row = bi * l + t;
            let base = row * lanes;
            let h_t = &states[base..base + lanes];
            let h_prev = (t > 0).then(|| &states[base - lanes..base]);
            let cs = &c[row * n..(row + 1) * n];
            for di in 0..d {
                let gy = dy[row * d + di];
                let xv = x[row * d + di];
                let mut gx = 0.0;
                for k in 0..n {
                    let j = di * n + k;
                    g.c[row * n + k] += gy * h_t[j];
                    let gh = dh[j] + gy * cs[k];
                    g.abar[base + j] = gh * h_prev.map_or(0.0, |hp| hp[j]);
                    g.bbar[base + j] = gh * xv;
                    gx += gh * bbar[base + j];
                    dh[j] = gh * abar[base + j];
                }
                g.x[row * d + di] = gx;
            }
        }
    }
    g
}

/// Gradients of [`zoh_decay`] into `(Δ, A)`.
pub(crate) fn zoh_decay_backward(
    dims: Dims,
    delta: &[f64],
    a: &[f64],
    abar: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let Dims { b, l, d, n } = dims;
    let mut gd = vec![0.0; delta.len()];
    let mut ga = vec![0.0; a.len()];
    for row in 0..b * l {
        for di in 0..d {
            let step = delta[row * d + di];
            let base = (row * d + di) * n;
            let mut acc = 0.0;
            for k in 0..n {
                let ge = g[base + k] * abar[base + k];
                acc += ge * a[di * n + k];
                ga[di * n + k] += ge * step;
            }
            gd[row * d + di] = acc;
        }
    }
    (gd, ga)
}

/// Gradients of [`zoh_input`] into `(Δ, A, B_sel)`.
///
/// With `z = Δ·A` and `φ(z) = (e^z − 1)/z`, the output is `Δ φ(z) B`, so
/// `∂/∂Δ = e^z B`, `∂/∂A = Δ² φ'(z) B` and `∂/∂B = Δ φ(z)`.
pub(crate) fn zoh_input_backward(
    dims: Dims,
    delta: &[f64],
    a: &[f64],
    b_sel: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let Dims { b, l, d, n } = dims;
    let mut gd = vec![0.0; delta.len()];
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b_sel.len()];
    for row in 0..b * l {
        for di in 0..d {
            let step = delta[row * d + di];
            let base = (row * d + di) * n;
            let mut acc = 0.0;
            for k in 0..n {
                let z = step * a[di * n + k];
                let bv = b_sel[row * n + k];
                let gv = g[base + k];
                acc += gv * z.exp() * bv;
                ga[di * n + k] += gv * step * step * zoh_factor_deriv(z) * bv;
                gb[row * n + k] += gv * step * zoh_factor(z);
            }
            gd[row * d + di] = acc;
        }
    }
    (gd, ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_zoh_closed_form() {
        let delta = t(&[1, 1, 1], &[std::f64::consts::LN_2]);
        let a = t(&[1, 1], &[-1.0]);
        let b = t(&[1, 1, 1], &[1.0]);
        assert!((zoh_decay(&delta, &a).unwrap().item() - 0.5).abs() < 1e-12);
        assert!((zoh_input(&delta, &a, &b).unwrap().item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zoh_rejects_nonpositive_steps() {
        let delta = t(&[1, 1, 1], &[0.0]);
        let a = t(&[1, 1], &[-1.0]);
        assert!(matches!(zoh_decay(&delta, &a), Err(Error::Domain(_))));
    }

    #[test]
    fn series_branches_agree_with_closed_forms() {
        for z in [0.999e-8f64, -0.999e-8] {
            assert!((zoh_factor(z) - z.exp_m1() / z).abs() < 1e-15);
        }
        for z in [0.999e-3f64, -0.999e-3] {
            let closed = (z * z.exp() - z.exp_m1()) / (z * z);
            assert!((zoh_factor_deriv(z) - closed).abs() < 1e-9);
        }
    }

    #[test]
    fn hand_recurrence() {
        // L=2, Ā=0.5, B̄=1, C=1, N=1, x=[1,1] → y=[1, 1.5]
        let sys = DiscretizedSystem {
            abar: t(&[1, 2, 1, 1], &[0.5, 0.5]),
            bbar: t(&[1, 2, 1, 1], &[1.0, 1.0]),
            c: t(&[1, 2, 1], &[1.0, 1.0]),
        };
        let x = t(&[1, 2, 1], &[1.0, 1.0]);
        let y = scan_sequential(&sys, &x).unwrap();
        assert_eq!(y.data(), &[1.0, 1.5]);
        let y1 = scan_chunked(&sys, &x, 1).unwrap();
        assert_eq!(y1.data(), &[1.0, 1.5]);
    }

    #[test]
    fn memoryless_and_zero_input() {
        let sys = DiscretizedSystem {
            abar: Tensor::zeros(vec![1, 3, 1, 2]),
            bbar: t(&[1, 3, 1, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]),
            c: t(&[1, 3, 2], &[1.0, 1.0, 0.5, 0.5, 2.0, 0.0]),
        };
        let x = t(&[1, 3, 1], &[1.0, -2.0, 3.0]);
        let y = scan_sequential(&sys, &x).unwrap();
        assert_eq!(y.data(), &[3.0, -3.0, 6.0]);
        let y0 = scan_sequential(&sys, &Tensor::zeros(vec![1, 3, 1])).unwrap();
        assert!(y0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pair_composition_is_associative_on_dyadics() {
        let p = ScanPair { decay: 0.5, offset: 1.25 };
        let q = ScanPair { decay: 0.75, offset: -0.5 };
        let r = ScanPair { decay: 0.25, offset: 2.0 };
        assert_eq!(p.then(q).then(r), p.then(q.then(r)));
        assert_eq!(ScanPair::IDENTITY.then(p), p);
        assert_eq!(p.then(ScanPair::IDENTITY), p);
    }

    #[test]
    fn chunk_zero_rejected() {
        let sys = DiscretizedSystem {
            abar: Tensor::zeros(vec![1, 1, 1, 1]),
            bbar: Tensor::zeros(vec![1, 1, 1, 1]),
            c: Tensor::zeros(vec![1, 1, 1]),
        };
        assert!(scan_chunked(&sys, &Tensor::zeros(vec![1, 1, 1]), 0).is_err());
    }
}
