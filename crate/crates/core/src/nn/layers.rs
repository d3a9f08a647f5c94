use crate::nn::math::{dot, sigmoid};
use crate::nn::params::{ParamStore, Slot};
use crate::rng::StreamRng;

/// `y = W x (+ b)`, with `W` stored row-major as `out x in`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: Slot,
    pub bias: Option<Slot>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut StreamRng,
    ) -> Self {
        let weight = store.alloc_uniform(&format!("{name}.weight"), &[output, input], input, rng);
        let bias = bias.then(|| store.alloc_uniform(&format!("{name}.bias"), &[output], input, rng));
        Linear {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input);
        let w = p.get(self.weight);
        let mut y: Vec<f64> = w.chunks_exact(self.input).map(|row| dot(row, x)).collect();
        if let Some(b) = self.bias {
            for (yi, bi) in y.iter_mut().zip(p.get(b)) {
                *yi += bi;
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, p: &ParamStore, x: &[f64], dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let w = p.get(self.weight);
        let gw = &mut grad[self.weight.range()];
        let mut dx = vec![0.0; self.input];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w[o * self.input..(o + 1) * self.input];
            let grow = &mut gw[o * self.input..(o + 1) * self.input];
            for i in 0..self.input {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        if let Some(b) = self.bias {
            for (gb, &g) in grad[b.range()].iter_mut().zip(dy) {
                *gb += g;
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Embedding {
    pub table: Slot,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut StreamRng) -> Self {
        // fan_in of a one-hot lookup is 1, which would give unit-scale rows;
        // scale by the embedding width instead.
        let table = store.alloc_uniform(&format!("{name}.table"), &[rows, dim], dim, rng);
        Embedding { table, rows, dim }
    }

    pub fn row<'a>(&self, p: &'a ParamStore, index: usize) -> &'a [f64] {
        &p.get(self.table)[index * self.dim..(index + 1) * self.dim]
    }

    pub fn accumulate(&self, grad: &mut [f64], index: usize, d: &[f64]) {
        let start = self.table.offset + index * self.dim;
        for (g, v) in grad[start..start + self.dim].iter_mut().zip(d) {
            *g += v;
        }
    }
}

/// Single-layer LSTM, gate order (input, forget, cell, output).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lstm {
    pub w_input: Slot,
    pub w_hidden: Slot,
    pub bias: Slot,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
struct LstmStep {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    steps: Vec<LstmStep>,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut StreamRng) -> Self {
        let w_input = store.alloc_uniform(&format!("{name}.w_input"), &[4 * hidden, input], hidden, rng);
        let w_hidden = store.alloc_uniform(&format!("{name}.w_hidden"), &[4 * hidden, hidden], hidden, rng);
        let bias = store.alloc_uniform(&format!("{name}.bias"), &[4 * hidden], hidden, rng);
        Lstm {
            w_input,
            w_hidden,
            bias,
            input,
            hidden,
        }
    }

    /// Runs over `xs` in order from zero state; returns every hidden state.
    pub fn forward(&self, p: &ParamStore, xs: &[&[f64]]) -> (Vec<Vec<f64>>, LstmCache) {
        let h = self.hidden;
        let wx = p.get(self.w_input);
        let wh = p.get(self.w_hidden);
        let b = p.get(self.bias);
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut outputs = Vec::with_capacity(xs.len());
        let mut steps = Vec::with_capacity(xs.len());
        for x in xs {
            let mut z = b.to_vec();
            for (r, zr) in z.iter_mut().enumerate() {
                *zr += dot(&wx[r * self.input..(r + 1) * self.input], x) + dot(&wh[r * h..(r + 1) * h], &h_prev);
            }
            let i: Vec<f64> = z[..h].iter().map(|&v| sigmoid(v)).collect();
            let f: Vec<f64> = z[h..2 * h].iter().map(|&v| sigmoid(v)).collect();
            let g: Vec<f64> = z[2 * h..3 * h].iter().map(|&v| v.tanh()).collect();
            let o: Vec<f64> = z[3 * h..].iter().map(|&v| sigmoid(v)).collect();
            let c: Vec<f64> = (0..h).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
            let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
            let h_new: Vec<f64> = (0..h).map(|k| o[k] * tanh_c[k]).collect();
            steps.push(LstmStep {
                h_prev: std::mem::replace(&mut h_prev, h_new.clone()),
                c_prev: std::mem::replace(&mut c_prev, c),
                i,
                f,
                g,
                o,
                tanh_c,
            });
            outputs.push(h_new);
        }
        (outputs, LstmCache { steps })
    }

    /// Backpropagation through time. `dhs[t]` is the loss gradient w.r.t.
    /// the hidden state emitted at step `t`; returns gradients w.r.t. inputs.
    pub fn backward(
        &self,
        p: &ParamStore,
        xs: &[&[f64]],
        cache: &LstmCache,
        dhs: &[Vec<f64>],
        grad: &mut [f64],
    ) -> Vec<Vec<f64>> {
        let h = self.hidden;
        let n = self.input;
        let wx = p.get(self.w_input);
        let wh = p.get(self.w_hidden);
        let mut dxs = vec![vec![0.0; n]; xs.len()];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        for t in (0..xs.len()).rev() {
            let s = &cache.steps[t];
            for k in 0..h {
                let dh = dhs[t][k] + dh_next[k];
                let do_ = dh * s.tanh_c[k];
                let dc = dh * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]) + dc_next[k];
                let di = dc * s.g[k];
                let df = dc * s.c_prev[k];
                let dg = dc * s.i[k];
                dc_next[k] = dc * s.f[k];
                dz[k] = di * s.i[k] * (1.0 - s.i[k]);
                dz[h + k] = df * s.f[k] * (1.0 - s.f[k]);
                dz[2 * h + k] = dg * (1.0 - s.g[k] * s.g[k]);
                dz[3 * h + k] = do_ * s.o[k] * (1.0 - s.o[k]);
            }
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            let x = xs[t];
            for (r, &g) in dz.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let gx = &mut grad[self.w_input.offset + r * n..self.w_input.offset + (r + 1) * n];
                for (gi, xi) in gx.iter_mut().zip(x.iter()) {
                    *gi += g * xi;
                }
                let gh = &mut grad[self.w_hidden.offset + r * h..self.w_hidden.offset + (r + 1) * h];
                for (gi, hi) in gh.iter_mut().zip(&s.h_prev) {
                    *gi += g * hi;
                }
                grad[self.bias.offset + r] += g;
                let rx = &wx[r * n..(r + 1) * n];
                for (d, w) in dxs[t].iter_mut().zip(rx) {
                    *d += g * w;
                }
                let rh = &wh[r * h..(r + 1) * h];
                for (d, w) in dh_next.iter_mut().zip(rh) {
                    *d += g * w;
                }
            }
        }
        dxs
    }
}

/// Forward and backward LSTMs; outputs are `[forward_t ; backward_t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

#[derive(Debug, Clone)]
pub struct BiLstmCache {
    fwd: LstmCache,
    bwd: LstmCache,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut StreamRng) -> Self {
        BiLstm {
            forward: Lstm::new(store, &format!("{name}.fwd"), input, hidden, rng),
            backward: Lstm::new(store, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn forward(&self, p: &ParamStore, xs: &[&[f64]]) -> (Vec<Vec<f64>>, BiLstmCache) {
        let (hf, fwd) = self.forward.forward(p, xs);
        let rev: Vec<&[f64]> = xs.iter().rev().copied().collect();
        let (mut hb, bwd) = self.backward.forward(p, &rev);
        hb.reverse();
        let out = hf
            .into_iter()
            .zip(hb)
            .map(|(mut a, b)| {
                a.extend(b);
                a
            })
            .collect();
        (out, BiLstmCache { fwd, bwd })
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        xs: &[&[f64]],
        cache: &BiLstmCache,
        douts: &[Vec<f64>],
        grad: &mut [f64],
    ) -> Vec<Vec<f64>> {
        let h = self.forward.hidden;
        let df: Vec<Vec<f64>> = douts.iter().map(|d| d[..h].to_vec()).collect();
        let db: Vec<Vec<f64>> = douts.iter().rev().map(|d| d[h..].to_vec()).collect();
        let mut dx = self.forward.backward(p, xs, &cache.fwd, &df, grad);
        let rev: Vec<&[f64]> = xs.iter().rev().copied().collect();
        let dx_rev = self.backward.backward(p, &rev, &cache.bwd, &db, grad);
        for (d, r) in dx.iter_mut().zip(dx_rev.iter().rev()) {
            for (a, b) in d.iter_mut().zip(r) {
                *a += b;
            }
        }
        dx
    }
}

/// Two affine layers with a ReLU and inverted dropout between them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp {
    pub hidden_layer: Linear,
    pub output_layer: Linear,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    /// Post-activation, post-dropout hidden vector.
    hidden: Vec<f64>,
    /// Dropout scale per unit (0 or 1/(1-p)); empty when dropout is off.
    mask: Vec<f64>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut StreamRng,
    ) -> Self {
        Mlp {
            hidden_layer: Linear::new(store, &format!("{name}.hidden"), input, hidden, true, rng),
            output_layer: Linear::new(store, &format!("{name}.out"), hidden, 1, true, rng),
            dropout,
        }
    }

    /// Returns the scalar logit. Dropout applies only when `dropout_rng` is given.
    pub fn forward(&self, p: &ParamStore, x: &[f64], dropout_rng: Option<&mut StreamRng>) -> (f64, MlpCache) {
        let pre = self.hidden_layer.forward(p, x);
        let mut hidden: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        let mut mask = Vec::new();
        if let Some(r) = dropout_rng {
            if self.dropout > 0.0 {
                let keep = 1.0 - self.dropout;
                mask = (0..hidden.len())
                    .map(|_| {
                        if crate::rng::bernoulli(r, keep) {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                for (h, m) in hidden.iter_mut().zip(&mask) {
                    *h *= m;
                }
            }
        }
        let logit = self.output_layer.forward(p, &hidden)[0];
        (
            logit,
            MlpCache {
                input: x.to_vec(),
                pre,
                hidden,
                mask,
            },
        )
    }

    pub fn backward(&self, p: &ParamStore, cache: &MlpCache, dlogit: f64, grad: &mut [f64]) -> Vec<f64> {
        let mut dh = self.output_layer.backward(p, &cache.hidden, &[dlogit], grad);
        for (k, d) in dh.iter_mut().enumerate() {
            if cache.pre[k] <= 0.0 {
                *d = 0.0;
            } else if !cache.mask.is_empty() {
                *d *= cache.mask[k];
            }
        }
        self.hidden_layer.backward(p, &cache.input, &dh, grad)
    }
}
