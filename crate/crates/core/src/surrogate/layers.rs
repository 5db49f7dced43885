//! Layer kernels. Spatial activations are stored channel-major across the
//! batch (`[c][n][h][w]`) so a 3x3 convolution is one GEMM over the whole
//! batch; flat activations are `[n][features]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub flat: bool,
    pub data: Vec<f64>,
}

impl Act {
    pub fn spatial(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), n * c * h * w);
        Self { n, c, h, w, flat: false, data }
    }

    pub fn flat(n: usize, features: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), n * features);
        Self {
            n,
            c: features,
            h: 1,
            w: 1,
            flat: true,
            data,
        }
    }

    pub fn features(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LayerSpec {
    /// 3x3 cross-correlation with zero "same" padding.
    Conv3x3 { cin: usize, cout: usize },
    Relu,
    /// 2x2 max pooling, stride 2 (axes of size 1 are left alone).
    MaxPool2,
    /// Inverted dropout.
    Dropout { rate: f64 },
    Flatten,
    Dense { nin: usize, nout: usize },
}

impl LayerSpec {
    pub fn n_params(&self) -> usize {
        match *self {
            LayerSpec::Conv3x3 { cin, cout } => cout * cin * 9 + cout,
            LayerSpec::Dense { nin, nout } => nout * nin + nout,
            _ => 0,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv3x3 { cin, .. } => cin * 9,
            LayerSpec::Dense { nin, .. } => nin,
            _ => 0,
        }
    }

    /// Number of weights (biases follow them in the parameter slice).
    pub fn n_weights(&self) -> usize {
        match *self {
            LayerSpec::Conv3x3 { cin, cout } => cout * cin * 9,
            LayerSpec::Dense { nin, nout } => nout * nin,
            _ => 0,
        }
    }
}

pub fn pooled(d: usize) -> usize {
    if d >= 2 {
        d / 2
    } else {
        d
    }
}

#[derive(Debug, Clone)]
pub enum Cache {
    Conv { cols: Vec<f64> },
    Relu { active: Vec<bool> },
    Pool { argmax: Vec<usize>, input: (usize, usize, usize, usize) },
    Dropout { mask: Vec<f64> },
    Flatten { c: usize, h: usize, w: usize, was_flat: bool },
    Dense { input: Vec<f64> },
}

/// `C = A B + beta C` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn im2col(x: &Act) -> Vec<f64> {
    let (n, c, h, w) = (x.n, x.c, x.h, x.w);
    let cols_n = n * h * w;
    let mut cols = vec![0.0; c * 9 * cols_n];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * cols_n;
                for i in 0..n {
                    let plane = (ci * n + i) * h * w;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let out = row + (i * h + y) * w;
                        let src = plane + sy as usize * w;
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                cols[out + xx] = x.data[src + sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let cols_n = n * h * w;
    let mut dx = vec![0.0; n * c * h * w];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * cols_n;
                for i in 0..n {
                    let plane = (ci * n + i) * h * w;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = row + (i * h + y) * w;
                        let dst = plane + sy as usize * w;
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                dx[dst + sx as usize] += dcols[src + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Dropout behaviour during a forward pass.
pub enum DropoutMode<'a> {
    Off,
    Sample(&'a mut ChaCha8Rng),
}

/// Forward pass of one layer; `cache` is filled only when requested.
pub fn forward(spec: &LayerSpec, p: &[f64], x: Act, dropout: &mut DropoutMode, keep: bool) -> (Act, Option<Cache>) {
    match *spec {
        LayerSpec::Conv3x3 { cin, cout } => {
            assert!(!x.flat && x.c == cin, "conv input has {} channels, expected {cin}", x.c);
            let cols = im2col(&x);
            let nhw = x.n * x.h * x.w;
            let (wts, bias) = p.split_at(cout * cin * 9);
            let mut out = vec![0.0; cout * nhw];
            for (o, row) in out.chunks_mut(nhw.max(1)).enumerate().take(cout) {
                row.fill(bias[o]);
            }
            gemm(cout, cin * 9, nhw, wts, (cin * 9, 1), &cols, (nhw, 1), 1.0, &mut out, (nhw, 1));
            let y = Act::spatial(x.n, cout, x.h, x.w, out);
            (y, keep.then_some(Cache::Conv { cols }))
        }
        LayerSpec::Relu => {
            let mut y = x;
            let mut active = if keep { Vec::with_capacity(y.data.len()) } else { Vec::new() };
            for v in &mut y.data {
                let on = *v > 0.0;
                if !on {
                    *v = 0.0;
                }
                if keep {
                    active.push(on);
                }
            }
            (y, keep.then_some(Cache::Relu { active }))
        }
        LayerSpec::MaxPool2 => {
            assert!(!x.flat, "max pooling needs a spatial input");
            let (n, c, h, w) = (x.n, x.c, x.h, x.w);
            let (ho, wo) = (pooled(h), pooled(w));
            let (sy, sx) = (if h >= 2 { 2 } else { 1 }, if w >= 2 { 2 } else { 1 });
            let mut out = Vec::with_capacity(n * c * ho * wo);
            let mut argmax = Vec::with_capacity(if keep { n * c * ho * wo } else { 0 });
            for plane in 0..n * c {
                let base = plane * h * w;
                for yo in 0..ho {
                    for xo in 0..wo {
                        let mut best = base + yo * sy * w + xo * sx;
                        for dy in 0..sy {
                            for dx in 0..sx {
                                let k = base + (yo * sy + dy) * w + xo * sx + dx;
                                if x.data[k] > x.data[best] {
                                    best = k;
                                }
                            }
                        }
                        out.push(x.data[best]);
                        if keep {
                            argmax.push(best);
                        }
                    }
                }
            }
            let y = Act::spatial(n, c, ho, wo, out);
            (y, keep.then_some(Cache::Pool { argmax, input: (n, c, h, w) }))
        }
        LayerSpec::Dropout { rate } => match dropout {
            DropoutMode::Sample(rng) if rate > 0.0 => {
                let scale = 1.0 / (1.0 - rate);
                let mut y = x;
                let mask: Vec<f64> = (0..y.data.len())
                    .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
                    .collect();
                for (v, m) in y.data.iter_mut().zip(&mask) {
                    *v *= m;
                }
                (y, keep.then_some(Cache::Dropout { mask }))
            }
            _ => {
                let len = x.data.len();
                (x, keep.then(|| Cache::Dropout { mask: vec![1.0; len] }))
            }
        },
        LayerSpec::Flatten => {
            if x.flat {
                let c = x.c;
                return (x, keep.then_some(Cache::Flatten { c, h: 1, w: 1, was_flat: true }));
            }
            let (n, c, h, w) = (x.n, x.c, x.h, x.w);
            let hw = h * w;
            let mut out = vec![0.0; n * c * hw];
            for ci in 0..c {
                for i in 0..n {
                    let src = (ci * n + i) * hw;
                    let dst = i * c * hw + ci * hw;
                    out[dst..dst + hw].copy_from_slice(&x.data[src..src + hw]);
                }
            }
            (Act::flat(n, c * hw, out), keep.then_some(Cache::Flatten { c, h, w, was_flat: false }))
        }
        LayerSpec::Dense { nin, nout } => {
            assert!(x.flat && x.c == nin, "dense input has {} features, expected {nin}", x.features());
            let n = x.n;
            let (wts, bias) = p.split_at(nout * nin);
            let mut out = Vec::with_capacity(n * nout);
            for _ in 0..n {
                out.extend_from_slice(bias);
            }
            // y[n, out] = x[n, in] W^T
            gemm(n, nin, nout, &x.data, (nin, 1), wts, (1, nin), 1.0, &mut out, (nout, 1));
            let y = Act::flat(n, nout, out);
            (y, keep.then_some(Cache::Dense { input: x.data }))
        }
    }
}

/// Backward pass: accumulates parameter gradients into `g` and returns the
/// input gradient. `dy` has the layout of the layer output.
pub fn backward(spec: &LayerSpec, p: &[f64], g: &mut [f64], cache: &Cache, dy: Act) -> Act {
    match (*spec, cache) {
        (LayerSpec::Conv3x3 { cin, cout }, Cache::Conv { cols }) => {
            let (n, h, w) = (dy.n, dy.h, dy.w);
            let nhw = n * h * w;
            let (gw, gb) = g.split_at_mut(cout * cin * 9);
            // dW[cout, cin9] += dY[cout, nhw] cols^T
            gemm(cout, nhw, cin * 9, &dy.data, (nhw, 1), cols, (1, nhw), 1.0, gw, (cin * 9, 1));
            for (o, b) in gb.iter_mut().enumerate() {
                *b += dy.data[o * nhw..(o + 1) * nhw].iter().sum::<f64>();
            }
            let wts = &p[..cout * cin * 9];
            let mut dcols = vec![0.0; cin * 9 * nhw];
            // dcols = W^T dY
            gemm(cin * 9, cout, nhw, wts, (1, cin * 9), &dy.data, (nhw, 1), 0.0, &mut dcols, (nhw, 1));
            Act::spatial(n, cin, h, w, col2im(&dcols, n, cin, h, w))
        }
        (LayerSpec::Relu, Cache::Relu { active }) => {
            let mut dx = dy;
            for (v, &on) in dx.data.iter_mut().zip(active) {
                if !on {
                    *v = 0.0;
                }
            }
            dx
        }
        (LayerSpec::MaxPool2, Cache::Pool { argmax, input }) => {
            let (n, c, h, w) = *input;
            let mut dx = vec![0.0; n * c * h * w];
            for (&k, &d) in argmax.iter().zip(&dy.data) {
                dx[k] += d;
            }
            Act::spatial(n, c, h, w, dx)
        }
        (LayerSpec::Dropout { .. }, Cache::Dropout { mask }) => {
            let mut dx = dy;
            for (v, m) in dx.data.iter_mut().zip(mask) {
                *v *= m;
            }
            dx
        }
        (LayerSpec::Flatten, Cache::Flatten { c, h, w, was_flat }) => {
            if *was_flat {
                return dy;
            }
            let (c, h, w) = (*c, *h, *w);
            let n = dy.n;
            let hw = h * w;
            let mut out = vec![0.0; n * c * hw];
            for ci in 0..c {
                for i in 0..n {
                    let dst = (ci * n + i) * hw;
                    let src = i * c * hw + ci * hw;
                    out[dst..dst + hw].copy_from_slice(&dy.data[src..src + hw]);
                }
            }
            Act::spatial(n, c, h, w, out)
        }
        (LayerSpec::Dense { nin, nout }, Cache::Dense { input }) => {
            let n = dy.n;
            let (gw, gb) = g.split_at_mut(nout * nin);
            // dW[out, in] += dY^T[out, n] X[n, in]
            gemm(nout, n, nin, &dy.data, (1, nout), input, (nin, 1), 1.0, gw, (nin, 1));
            for i in 0..n {
                for (o, b) in gb.iter_mut().enumerate() {
                    *b += dy.data[i * nout + o];
                }
            }
            let wts = &p[..nout * nin];
            let mut dx = vec![0.0; n * nin];
            gemm(n, nout, nin, &dy.data, (nout, 1), wts, (nin, 1), 0.0, &mut dx, (nin, 1));
            Act::flat(n, nin, dx)
        }
        _ => panic!("cache does not match layer"),
    }
}
