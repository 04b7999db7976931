//! Small WaveNet-style prior: a stack of dilated causal convolutions with
//! kernel width 2 and tanh residual blocks, followed by a 1x1 projection to
//! `d` logits.
//!
//! The network input at time `t` is `x[t-1]`, so the logits at position `i`
//! see exactly `x[i-w..i]` with `w = 1 + sum(dilations)`. Positions before
//! the sequence start are filled with the grid sentinel.
//!
//! Forward and backward passes are written out by hand; `backward_params`
//! accumulates parameter gradients for training, `backward` produces the
//! input vector-Jacobian product used by the samplers.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_finite, ConditionalModel, Forward};
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvNetConfig {
    pub channels: usize,
    pub dilations: Vec<usize>,
}

impl Default for ConvNetConfig {
    fn default() -> Self {
        ConvNetConfig {
            channels: 32,
            dilations: vec![1, 2, 4, 8],
        }
    }
}

impl ConvNetConfig {
    pub fn window(&self) -> usize {
        1 + self.dilations.iter().sum::<usize>()
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    c: usize,
    d: usize,
    in_prev: usize,
    in_cur: usize,
    in_bias: usize,
    // (A, B, bias) for each residual layer
    res: Vec<(usize, usize, usize)>,
    out_w: usize,
    out_b: usize,
    total: usize,
}

impl Layout {
    fn new(c: usize, d: usize, layers: usize) -> Self {
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let in_prev = take(c);
        let in_cur = take(c);
        let in_bias = take(c);
        let res = (1..layers).map(|_| (take(c * c), take(c * c), take(c))).collect();
        let out_w = take(d * c);
        let out_b = take(d);
        Layout {
            c,
            d,
            in_prev,
            in_cur,
            in_bias,
            res,
            out_w,
            out_b,
            total: off,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalConvNet {
    grid: Grid,
    config: ConvNetConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Activations kept from the forward pass.
struct Tape {
    first: usize,
    steps: usize,
    input: Vec<f64>,
    // tanh outputs per layer, steps x c
    acts: Vec<Vec<f64>>,
    // residual stream after each layer, steps x c
    hidden: Vec<Vec<f64>>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl CausalConvNet {
    /// Random conv weights and a zero output projection, so a fresh network
    /// predicts the uniform distribution.
    pub fn new<R: Rng + ?Sized>(grid: Grid, config: ConvNetConfig, rng: &mut R) -> Result<Self> {
        if config.channels == 0 || config.dilations.is_empty() || config.dilations.contains(&0) {
            return Err(Error::invalid("conv net needs positive channels and dilations"));
        }
        let c = config.channels;
        let layout = Layout::new(c, grid.d(), config.dilations.len());
        let mut params = vec![0.0; layout.total];
        let mut fill = |slice: &mut [f64], scale: f64| {
            for p in slice {
                *p = scale * rng.sample::<f64, _>(StandardNormal);
            }
        };
        let input_scale = 1.0 / grid.span().max(1e-12);
        fill(&mut params[layout.in_prev..layout.in_prev + c], input_scale);
        fill(&mut params[layout.in_cur..layout.in_cur + c], input_scale);
        let res_scale = (1.0 / (2.0 * c as f64)).sqrt();
        for &(a, b, _) in &layout.res {
            fill(&mut params[a..a + c * c], res_scale);
            fill(&mut params[b..b + c * c], res_scale);
        }
        Ok(CausalConvNet {
            grid,
            config,
            layout,
            params,
        })
    }

    pub fn from_params(grid: Grid, config: ConvNetConfig, params: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(config.channels, grid.d(), config.dilations.len());
        if params.len() != layout.total {
            return Err(Error::Dimension {
                expected: layout.total,
                actual: params.len(),
            });
        }
        Ok(CausalConvNet {
            grid,
            config,
            layout,
            params,
        })
    }

    pub fn param_count_for(config: &ConvNetConfig, d: usize) -> usize {
        Layout::new(config.channels, d, config.dilations.len()).total
    }

    pub fn config(&self) -> &ConvNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Randomize the output projection with standard deviation `scale`.
    pub fn randomize_output<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        let l = &self.layout;
        for p in &mut self.params[l.out_w..l.out_b + l.d] {
            *p = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }

    fn run_forward(&self, x: &[f64], first: usize) -> Result<(Vec<f64>, Tape)> {
        let n = x.len();
        if first > n {
            return Err(Error::invalid(format!("first target {first} beyond length {n}")));
        }
        check_finite(x)?;
        let l = &self.layout;
        let (c, d) = (l.c, l.d);
        let w = self.window();
        let count = n - first;
        if count == 0 {
            let tape = Tape {
                first,
                steps: 0,
                input: Vec::new(),
                acts: Vec::new(),
                hidden: Vec::new(),
            };
            return Ok((Vec::new(), tape));
        }
        // local step s corresponds to padded time first + s; padded time tau
        // holds x[tau - w] or the sentinel when tau < w
        let steps = count + w - 1;
        let sentinel = self.grid.sentinel();
        let input: Vec<f64> = (0..steps)
            .map(|s| {
                let tau = first + s;
                if tau < w {
                    sentinel
                } else {
                    x[tau - w]
                }
            })
            .collect();

        let p = &self.params;
        let dil = &self.config.dilations;
        let mut acts = Vec::with_capacity(dil.len());
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(dil.len());

        let mut a0 = vec![0.0; steps * c];
        let (wp, wc, b0) = (
            &p[l.in_prev..l.in_prev + c],
            &p[l.in_cur..l.in_cur + c],
            &p[l.in_bias..l.in_bias + c],
        );
        for s in 0..steps {
            let prev = if s >= dil[0] { input[s - dil[0]] } else { 0.0 };
            let cur = input[s];
            let row = &mut a0[s * c..(s + 1) * c];
            for o in 0..c {
                row[o] = (wp[o] * prev + wc[o] * cur + b0[o]).tanh();
            }
        }
        hidden.push(a0.clone());
        acts.push(a0);

        for (li, &(oa, ob, obias)) in l.res.iter().enumerate() {
            let dl = dil[li + 1];
            let h = &hidden[li];
            let (ma, mb, bias) = (&p[oa..oa + c * c], &p[ob..ob + c * c], &p[obias..obias + c]);
            let mut act = vec![0.0; steps * c];
            let mut out = h.clone();
            for s in 0..steps {
                let cur = &h[s * c..(s + 1) * c];
                let prev = if s >= dl { Some(&h[(s - dl) * c..(s - dl + 1) * c]) } else { None };
                for o in 0..c {
                    let mut z = bias[o] + dot(&mb[o * c..(o + 1) * c], cur);
                    if let Some(pv) = prev {
                        z += dot(&ma[o * c..(o + 1) * c], pv);
                    }
                    let a = z.tanh();
                    act[s * c + o] = a;
                    out[s * c + o] += a;
                }
            }
            acts.push(act);
            hidden.push(out);
        }

        let top = hidden.last().expect("at least one layer");
        let (wo, bo) = (&p[l.out_w..l.out_w + d * c], &p[l.out_b..l.out_b + d]);
        let mut logits = Vec::with_capacity(count * d);
        for s in (w - 1)..steps {
            let h = &top[s * c..(s + 1) * c];
            for k in 0..d {
                logits.push(bo[k] + dot(&wo[k * c..(k + 1) * c], h));
            }
        }
        Ok((
            logits,
            Tape {
                first,
                steps,
                input,
                acts,
                hidden,
            },
        ))
    }

    /// Shared backward pass; returns the gradient with respect to the padded
    /// input steps and optionally accumulates parameter gradients.
    fn run_backward(&self, tape: &Tape, upstream: &[f64], mut grads: Option<&mut [f64]>) -> Vec<f64> {
        let l = &self.layout;
        let (c, d) = (l.c, l.d);
        let w = self.window();
        let steps = tape.steps;
        let p = &self.params;
        let dil = &self.config.dilations;
        if steps == 0 {
            return Vec::new();
        }

        let top = tape.hidden.last().expect("at least one layer");
        let wo = &p[l.out_w..l.out_w + d * c];
        let mut dh = vec![0.0; steps * c];
        for (k, u) in upstream.chunks(d).enumerate() {
            let s = k + w - 1;
            let row = &mut dh[s * c..(s + 1) * c];
            for (j, &uj) in u.iter().enumerate() {
                if uj != 0.0 {
                    axpy(uj, &wo[j * c..(j + 1) * c], row);
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                let h = &top[s * c..(s + 1) * c];
                for (j, &uj) in u.iter().enumerate() {
                    axpy(uj, h, &mut g[l.out_w + j * c..l.out_w + (j + 1) * c]);
                    g[l.out_b + j] += uj;
                }
            }
        }

        let mut delta = vec![0.0; c];
        for (li, &(oa, ob, obias)) in l.res.iter().enumerate().rev() {
            let dl = dil[li + 1];
            let act = &tape.acts[li + 1];
            let h_in = &tape.hidden[li];
            let (ma, mb) = (&p[oa..oa + c * c], &p[ob..ob + c * c]);
            // residual path passes the gradient through unchanged
            let mut dprev = dh.clone();
            for s in (0..steps).rev() {
                let mut any = false;
                for o in 0..c {
                    let a = act[s * c + o];
                    delta[o] = dh[s * c + o] * (1.0 - a * a);
                    any |= delta[o] != 0.0;
                }
                if !any {
                    continue;
                }
                for o in 0..c {
                    let dz = delta[o];
                    if dz == 0.0 {
                        continue;
                    }
                    axpy(dz, &mb[o * c..(o + 1) * c], &mut dprev[s * c..(s + 1) * c]);
                    if s >= dl {
                        axpy(dz, &ma[o * c..(o + 1) * c], &mut dprev[(s - dl) * c..(s - dl + 1) * c]);
                    }
                }
                if let Some(g) = grads.as_deref_mut() {
                    let cur = &h_in[s * c..(s + 1) * c];
                    for o in 0..c {
                        let dz = delta[o];
                        if dz == 0.0 {
                            continue;
                        }
                        axpy(dz, cur, &mut g[ob + o * c..ob + (o + 1) * c]);
                        if s >= dl {
                            axpy(dz, &h_in[(s - dl) * c..(s - dl + 1) * c], &mut g[oa + o * c..oa + (o + 1) * c]);
                        }
                        g[obias + o] += dz;
                    }
                }
            }
            dh = dprev;
        }

        let a0 = &tape.acts[0];
        let (wp, wc) = (&p[l.in_prev..l.in_prev + c], &p[l.in_cur..l.in_cur + c]);
        let mut dinput = vec![0.0; steps];
        for s in 0..steps {
            for o in 0..c {
                let a = a0[s * c + o];
                delta[o] = dh[s * c + o] * (1.0 - a * a);
            }
            dinput[s] += dot(wc, &delta);
            if s >= dil[0] {
                dinput[s - dil[0]] += dot(wp, &delta);
            }
            if let Some(g) = grads.as_deref_mut() {
                let prev = if s >= dil[0] { tape.input[s - dil[0]] } else { 0.0 };
                let cur = tape.input[s];
                for o in 0..c {
                    g[l.in_prev + o] += delta[o] * prev;
                    g[l.in_cur + o] += delta[o] * cur;
                    g[l.in_bias + o] += delta[o];
                }
            }
        }
        dinput
    }

    fn input_grad_to_x(&self, tape: &Tape, dinput: &[f64], n: usize) -> Vec<f64> {
        let w = self.window();
        let mut dx = vec![0.0; n];
        for (s, &g) in dinput.iter().enumerate() {
            let tau = tape.first + s;
            if tau >= w {
                dx[tau - w] = g;
            }
        }
        dx
    }

    /// Forward plus backward accumulating `d(sum upstream . logits)/d(params)`
    /// into `grads`; returns the logits.
    pub fn backward_params(&self, x: &[f64], first: usize, upstream_fn: impl FnOnce(&[f64]) -> Vec<f64>, grads: &mut [f64]) -> Result<Vec<f64>> {
        let (logits, tape) = self.run_forward(x, first)?;
        let upstream = upstream_fn(&logits);
        self.run_backward(&tape, &upstream, Some(grads));
        Ok(logits)
    }
}

impl ConditionalModel for CausalConvNet {
    fn kind(&self) -> &'static str {
        "convnet"
    }

    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn window(&self) -> usize {
        self.config.window()
    }

    fn forward(&self, x: &[f64], first: usize) -> Result<Forward> {
        let (logits, tape) = self.run_forward(x, first)?;
        Ok(Forward::new(x.len(), first, self.grid.d(), logits).with_tape(Box::new(tape)))
    }

    fn backward(&self, x: &[f64], fwd: &Forward, upstream: &[f64]) -> Result<Vec<f64>> {
        if upstream.len() != fwd.all_logits().len() {
            return Err(Error::Dimension {
                expected: fwd.all_logits().len(),
                actual: upstream.len(),
            });
        }
        let tape = fwd
            .tape::<Tape>()
            .ok_or_else(|| Error::invalid("forward pass carries no conv net tape"))?;
        let dinput = self.run_backward(tape, upstream, None);
        Ok(self.input_grad_to_x(tape, &dinput, x.len()))
    }

    fn encode(&self, w: &mut dyn Write) -> Result<()> {
        let mut dims = vec![
            self.config.channels as u32,
            2,
            self.config.dilations.len() as u32,
        ];
        dims.extend(self.config.dilations.iter().map(|&v| v as u32));
        dims.push(self.grid.d() as u32);
        super::checkpoint::write_descriptor(w, super::checkpoint::CONVNET_TAG, &dims)?;
        for &p in &self.params {
            w.write_all(&(p as f32).to_le_bytes())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::softmax;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64) -> CausalConvNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ConvNetConfig {
            channels: 4,
            dilations: vec![1, 2, 4],
        };
        let mut net = CausalConvNet::new(Grid::linear(5, -1.0, 1.0).unwrap(), cfg, &mut rng).unwrap();
        net.randomize_output(0.5, &mut rng);
        net
    }

    #[test]
    fn window_is_receptive_field() {
        assert_eq!(ConvNetConfig::default().window(), 16);
        assert_eq!(small_net(0).window(), 8);
    }

    #[test]
    fn zero_output_layer_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = CausalConvNet::new(Grid::linear(16, -1.0, 1.0).unwrap(), ConvNetConfig::default(), &mut rng).unwrap();
        let p = softmax(&net.logits(&[0.3, -0.2, 0.9]).unwrap());
        assert!(p.iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn logits_ignore_positions_beyond_window() {
        let net = small_net(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = net.forward(&x, 0).unwrap();
        for j in 0..x.len() {
            let mut y = x.clone();
            y[j] += 0.37;
            let pert = net.forward(&y, 0).unwrap();
            for i in 0..x.len() {
                let same = base.logits(i) == pert.logits(i);
                let in_window = j < i && j + net.window() >= i;
                assert!(same || in_window, "target {i} changed when perturbing {j}");
            }
        }
    }

    #[test]
    fn slice_forward_is_exact_after_window() {
        let net = small_net(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let full = net.forward(&x, 0).unwrap();
        let off = 11;
        let w = net.window();
        let part = net.forward(&x[off..], w).unwrap();
        for i in (off + w)..x.len() {
            assert_eq!(full.logits(i), part.logits(i - off));
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let net = small_net(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fwd = net.forward(&x, 0).unwrap();
        let up: Vec<f64> = (0..fwd.all_logits().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = net.backward(&x, &fwd, &up).unwrap();
        let objective = |x: &[f64]| -> f64 { dot(net.forward(x, 0).unwrap().all_logits(), &up) };
        let h = 1e-5;
        for j in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-7 * (1.0 + fd.abs()), "coord {j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let net = small_net(8);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n_logits = x.len() * 5;
        let up: Vec<f64> = (0..n_logits).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut grads = vec![0.0; net.params().len()];
        net.backward_params(&x, 0, |_| up.clone(), &mut grads).unwrap();
        let h = 1e-6;
        for pi in (0..net.params().len()).step_by(3) {
            let mut plus = net.clone();
            plus.params_mut()[pi] += h;
            let mut minus = net.clone();
            minus.params_mut()[pi] -= h;
            let fp = dot(plus.forward(&x, 0).unwrap().all_logits(), &up);
            let fm = dot(minus.forward(&x, 0).unwrap().all_logits(), &up);
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - grads[pi]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {pi}: {fd} vs {}", grads[pi]);
        }
    }

    #[test]
    fn vjp_length_mismatch_errors() {
        let net = small_net(3);
        assert!(net.input_vjp(&[0.1, 0.2], &[1.0; 4]).is_err());
        let g = net.input_vjp(&[0.1, 0.2], &[0.0; 5]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }
}
