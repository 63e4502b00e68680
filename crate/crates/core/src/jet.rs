//! Batched Taylor-mode evaluation of an [`MlpParams`] network.
//!
//! Each collocation point carries the network value together with the input
//! derivatives a loss needs (first order in `a`, `z`, `t`; pure second order
//! in `a` and `z`). All channels of a chunk of points are stacked side by side
//! so each layer is one matrix product. [`backward`] pulls adjoints of those
//! output channels back to a parameter gradient.
//!
//! This path computes the same quantities as recording the network on a
//! [`crate::autodiff::Tape`] and differentiating it; the tests pin the two
//! against each other.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::autodiff::{sigmoid, softplus, tanh};
use crate::error::{AbhError, Result};
use crate::net::{InputScaler, MlpParams, OutputHead};
use crate::par::{self, Execution, CHUNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Value,
    DA,
    DZ,
    DT,
    DAA,
    DZZ,
}

/// Which derivative channels to propagate. The value is always present.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Channels {
    pub a: bool,
    pub z: bool,
    pub t: bool,
    pub aa: bool,
    pub zz: bool,
}

impl Channels {
    pub const VALUE: Channels = Channels { a: false, z: false, t: false, aa: false, zz: false };
    pub const ALL: Channels = Channels { a: true, z: true, t: true, aa: true, zz: true };

    pub fn with(mut self, ch: Channel) -> Self {
        match ch {
            Channel::Value => {}
            Channel::DA => self.a = true,
            Channel::DZ => self.z = true,
            Channel::DT => self.t = true,
            Channel::DAA => {
                self.a = true;
                self.aa = true
            }
            Channel::DZZ => {
                self.z = true;
                self.zz = true
            }
        }
        self
    }

    fn normalized(mut self) -> Self {
        self.a |= self.aa;
        self.z |= self.zz;
        self
    }

    /// Present channels in storage order.
    pub fn list(self) -> Vec<Channel> {
        let s = self.normalized();
        let mut out = vec![Channel::Value];
        for (on, ch) in [
            (s.a, Channel::DA),
            (s.z, Channel::DZ),
            (s.t, Channel::DT),
            (s.aa, Channel::DAA),
            (s.zz, Channel::DZZ),
        ] {
            if on {
                out.push(ch);
            }
        }
        out
    }
}

/// Block layout of the present channels.
#[derive(Clone, Debug)]
struct Layout {
    list: Vec<Channel>,
    /// `(first-order block, optional pure second-order block, input index)`
    pairs: Vec<(usize, Option<usize>, usize)>,
}

impl Layout {
    fn new(ch: Channels) -> Self {
        let list = ch.list();
        let pos = |c: Channel| list.iter().position(|&x| x == c);
        let mut pairs = Vec::new();
        for (first, second, input) in [
            (Channel::DA, Some(Channel::DAA), 0),
            (Channel::DZ, Some(Channel::DZZ), 1),
            (Channel::DT, None, 2),
        ] {
            if let Some(f) = pos(first) {
                pairs.push((f, second.and_then(pos), input));
            }
        }
        Layout { list, pairs }
    }

    fn count(&self) -> usize {
        self.list.len()
    }
}

/// Network outputs per point and channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Jets {
    n: usize,
    list: Vec<Channel>,
    data: Vec<f64>,
}

impl Jets {
    fn new(n: usize, list: Vec<Channel>) -> Self {
        let data = vec![0.0; n * list.len()];
        Jets { n, list, data }
    }

    /// Zero adjoint with the same layout.
    pub fn zeros_like(&self) -> Self {
        Jets::new(self.n, self.list.clone())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn has(&self, ch: Channel) -> bool {
        self.list.contains(&ch)
    }

    fn block(&self, ch: Channel) -> usize {
        self.list
            .iter()
            .position(|&c| c == ch)
            .unwrap_or_else(|| panic!("channel {ch:?} was not propagated"))
    }

    pub fn get(&self, ch: Channel) -> &[f64] {
        let b = self.block(ch);
        &self.data[b * self.n..(b + 1) * self.n]
    }

    pub fn get_mut(&mut self, ch: Channel) -> &mut [f64] {
        let b = self.block(ch);
        &mut self.data[b * self.n..(b + 1) * self.n]
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|x| *x *= k);
    }

    /// `self += k * other` (same layout).
    pub fn add_scaled(&mut self, k: f64, other: &Jets) {
        assert_eq!(self.list, other.list);
        self.data.iter_mut().zip(&other.data).for_each(|(x, y)| *x += k * y);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Intermediate results of [`forward`] kept for [`backward`].
pub struct Trace {
    layout: Layout,
    ranges: Vec<std::ops::Range<usize>>,
    chunks: Vec<ChunkTrace>,
}

struct ChunkTrace {
    /// Input to each layer, `(fan_in, C * m)`.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer, `(fan_out, C * m)`.
    pre: Vec<Array2<f64>>,
}

#[derive(Clone, Copy)]
enum Act {
    Tanh,
    Softplus,
}

/// `f, f', f'', f'''` at `x`.
#[inline]
fn act_derivs(act: Act, x: f64) -> [f64; 4] {
    match act {
        Act::Tanh => {
            let y = tanh(x);
            let d1 = 1.0 - y * y;
            let d2 = -2.0 * y * d1;
            let d3 = -2.0 * d1 * d1 + 4.0 * y * y * d1;
            [y, d1, d2, d3]
        }
        Act::Softplus => {
            let s = sigmoid(x);
            let d2 = s * (1.0 - s);
            [softplus(x), s, d2, d2 * (1.0 - 2.0 * s)]
        }
    }
}

fn act_forward(act: Act, z: &Array2<f64>, layout: &Layout, m: usize) -> Array2<f64> {
    if layout.pairs.is_empty() {
        return z.mapv(|x| match act {
            Act::Tanh => tanh(x),
            Act::Softplus => softplus(x),
        });
    }
    let mut y = Array2::<f64>::zeros(z.dim());
    for (zr, mut yr) in z.rows().into_iter().zip(y.rows_mut()) {
        let zs = zr.as_slice().expect("row-major");
        let ys = yr.as_slice_mut().expect("row-major");
        for i in 0..m {
            let [f, d1, d2, _] = act_derivs(act, zs[i]);
            ys[i] = f;
            for &(fb, sb, _) in &layout.pairs {
                let xk = zs[fb * m + i];
                ys[fb * m + i] = d1 * xk;
                if let Some(sb) = sb {
                    ys[sb * m + i] = d2 * xk * xk + d1 * zs[sb * m + i];
                }
            }
        }
    }
    y
}

/// `tanh` derivatives from its output.
#[inline]
fn tanh_derivs_from_output(y: f64) -> [f64; 4] {
    let d1 = 1.0 - y * y;
    [y, d1, -2.0 * y * d1, -2.0 * d1 * d1 + 4.0 * y * y * d1]
}

/// Pulls `ybar` back through the activation. `out` is the forward output,
/// which spares re-evaluating `tanh`.
fn act_backward(act: Act, z: &Array2<f64>, out: &Array2<f64>, ybar: &Array2<f64>, layout: &Layout, m: usize) -> Array2<f64> {
    let mut zbar = Array2::<f64>::zeros(z.dim());
    let rows = z.rows().into_iter().zip(out.rows()).zip(ybar.rows()).zip(zbar.rows_mut());
    for (((zr, or), yr), mut br) in rows {
        let zs = zr.as_slice().expect("row-major");
        let os = or.as_slice().expect("row-major");
        let yb = yr.as_slice().expect("row-major");
        let bs = br.as_slice_mut().expect("row-major");
        for i in 0..m {
            let [_, d1, d2, d3] = match act {
                Act::Tanh => tanh_derivs_from_output(os[i]),
                Act::Softplus => act_derivs(act, zs[i]),
            };
            let mut val = yb[i] * d1;
            for &(fb, sb, _) in &layout.pairs {
                let xk = zs[fb * m + i];
                let ybk = yb[fb * m + i];
                let mut bk = ybk * d1;
                val += ybk * d2 * xk;
                if let Some(sb) = sb {
                    let xkk = zs[sb * m + i];
                    let ybkk = yb[sb * m + i];
                    bs[sb * m + i] = ybkk * d1;
                    bk += 2.0 * ybkk * d2 * xk;
                    val += ybkk * (d3 * xk * xk + d2 * xkk);
                }
                bs[fb * m + i] = bk;
            }
            bs[i] = val;
        }
    }
    zbar
}

fn input_block(scaler: &InputScaler, pts: &[[f64; 3]], layout: &Layout) -> Array2<f64> {
    let m = pts.len();
    let mut h = Array2::<f64>::zeros((3, layout.count() * m));
    let slopes = scaler.slopes();
    for (i, p) in pts.iter().enumerate() {
        let sx = scaler.scale(*p);
        for k in 0..3 {
            h[[k, i]] = sx[k];
        }
    }
    for &(fb, _, input) in &layout.pairs {
        h.slice_mut(s![input, fb * m..(fb + 1) * m]).fill(slopes[input]);
    }
    h
}

fn forward_chunk(params: &MlpParams, scaler: &InputScaler, pts: &[[f64; 3]], layout: &Layout) -> (Array2<f64>, ChunkTrace) {
    let m = pts.len();
    let last = params.num_layers() - 1;
    let mut h = input_block(scaler, pts, layout);
    let mut inputs = Vec::with_capacity(params.num_layers());
    let mut pre = Vec::with_capacity(params.num_layers());
    for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        let mut z = w.dot(&h);
        z.slice_mut(s![.., 0..m])
            .axis_iter_mut(Axis(1))
            .for_each(|mut col| col += b);
        let next = if l < last {
            act_forward(Act::Tanh, &z, layout, m)
        } else {
            match params.head {
                OutputHead::Identity => z.clone(),
                OutputHead::Softplus => act_forward(Act::Softplus, &z, layout, m),
            }
        };
        inputs.push(std::mem::replace(&mut h, next));
        pre.push(z);
    }
    (h, ChunkTrace { inputs, pre })
}

fn check_points(scaler: &InputScaler, pts: &[[f64; 3]]) -> Result<()> {
    pts.iter().try_for_each(|p| scaler.check(*p))
}

/// Evaluates the network and the requested derivative channels at `pts`,
/// keeping what [`backward`] needs.
pub fn forward(
    params: &MlpParams,
    scaler: &InputScaler,
    pts: &[[f64; 3]],
    channels: Channels,
    exec: Execution,
) -> Result<(Jets, Trace)> {
    check_points(scaler, pts)?;
    let layout = Layout::new(channels);
    let ranges = par::chunk_ranges(pts.len(), CHUNK);
    let results = par::map_indexed(ranges.len(), exec, |c| {
        forward_chunk(params, scaler, &pts[ranges[c].clone()], &layout)
    });
    let mut jets = Jets::new(pts.len(), layout.list.clone());
    let mut chunks = Vec::with_capacity(results.len());
    for (range, (out, trace)) in ranges.iter().zip(results) {
        scatter(&mut jets, range, out.view());
        chunks.push(trace);
    }
    Ok((jets, Trace { layout, ranges, chunks }))
}

/// Like [`forward`] but drops the trace.
pub fn evaluate(
    params: &MlpParams,
    scaler: &InputScaler,
    pts: &[[f64; 3]],
    channels: Channels,
    exec: Execution,
) -> Result<Jets> {
    check_points(scaler, pts)?;
    let layout = Layout::new(channels);
    let ranges = par::chunk_ranges(pts.len(), CHUNK);
    let results = par::map_indexed(ranges.len(), exec, |c| {
        forward_chunk(params, scaler, &pts[ranges[c].clone()], &layout).0
    });
    let mut jets = Jets::new(pts.len(), layout.list.clone());
    for (range, out) in ranges.iter().zip(results) {
        scatter(&mut jets, range, out.view());
    }
    Ok(jets)
}

fn scatter(jets: &mut Jets, range: &std::ops::Range<usize>, out: ArrayView2<f64>) {
    let m = range.len();
    let n = jets.n;
    for b in 0..jets.list.len() {
        for i in 0..m {
            jets.data[b * n + range.start + i] = out[[0, b * m + i]];
        }
    }
}

/// Gradient of `sum(adjoint * jets)` with respect to the parameters, in
/// canonical order.
pub fn backward(params: &MlpParams, trace: &Trace, adjoint: &Jets, exec: Execution) -> Vec<f64> {
    assert_eq!(adjoint.list, trace.layout.list, "adjoint layout differs from the forward pass");
    let layout = &trace.layout;
    let n = adjoint.n;
    let partial = par::map_indexed(trace.chunks.len(), exec, |c| {
        let range = &trace.ranges[c];
        let chunk = &trace.chunks[c];
        let m = range.len();
        let mut out_bar = Array2::<f64>::zeros((1, layout.count() * m));
        for b in 0..layout.count() {
            for i in 0..m {
                out_bar[[0, b * m + i]] = adjoint.data[b * n + range.start + i];
            }
        }
        let last = params.num_layers() - 1;
        let mut zbar = match params.head {
            OutputHead::Identity => out_bar,
            OutputHead::Softplus => act_backward(Act::Softplus, &chunk.pre[last], &chunk.pre[last], &out_bar, layout, m),
        };
        let mut grads: Vec<(Array2<f64>, Vec<f64>)> = Vec::with_capacity(params.num_layers());
        for l in (0..=last).rev() {
            let gw = zbar.dot(&chunk.inputs[l].t());
            let gb: Vec<f64> = zbar
                .slice(s![.., 0..m])
                .rows()
                .into_iter()
                .map(|r| r.sum())
                .collect();
            grads.push((gw, gb));
            if l > 0 {
                let hbar = params.weights[l].t().dot(&zbar);
                zbar = act_backward(Act::Tanh, &chunk.pre[l - 1], &chunk.inputs[l], &hbar, layout, m);
            }
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(params.num_params());
        for (gw, gb) in grads {
            flat.extend(gw.iter());
            flat.extend(gb);
        }
        flat
    });
    let mut total = vec![0.0; params.num_params()];
    for g in partial {
        total.iter_mut().zip(g).for_each(|(t, x)| *t += x);
    }
    total
}

/// Numeric-error helper for heads: first non-finite entry of `values`.
pub(crate) fn first_non_finite(context: &'static str, values: &[f64]) -> Result<()> {
    match values.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(AbhError::numeric(context, i, format!("value {}", values[i]))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::economy::ModelParams;
    use crate::net::{eval_density, eval_value, TapeNet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scaler() -> InputScaler {
        InputScaler::for_model(&ModelParams::default()).unwrap()
    }

    fn random_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.gen_range(0.0..=5.0), rng.gen_range(0.5..=1.5), rng.gen_range(0.0..=10.0)])
            .collect()
    }

    #[test]
    fn channels_match_tape_derivatives() {
        for head in [OutputHead::Identity, OutputHead::Softplus] {
            let p = MlpParams::init(4, &[3, 9, 7, 1], head).unwrap();
            let pts = random_points(5, 3);
            let jets = evaluate(&p, &scaler(), &pts, Channels::ALL, Execution::Sequential).unwrap();
            for (i, x) in pts.iter().enumerate() {
                let mut on = match head {
                    OutputHead::Identity => eval_value(&p, &scaler(), x[0], x[1], x[2]),
                    OutputHead::Softplus => eval_density(&p, &scaler(), x[0], x[1], x[2]),
                }
                .unwrap();
                let out = on.out;
                let g = on.tape.gradient(out, &[on.a, on.z, on.t]).unwrap();
                let (a, z) = (on.a, on.z);
                let aa = on.tape.second_partial(out, a, a).unwrap();
                let zz = on.tape.second_partial(out, z, z).unwrap();
                let close = |u: f64, v: f64| (u - v).abs() <= 1e-12 * v.abs().max(1.0);
                assert!(close(jets.get(Channel::Value)[i], on.tape.value(out)));
                assert!(close(jets.get(Channel::DA)[i], g[0]));
                assert!(close(jets.get(Channel::DZ)[i], g[1]));
                assert!(close(jets.get(Channel::DT)[i], g[2]));
                assert!(close(jets.get(Channel::DAA)[i], aa));
                assert!(close(jets.get(Channel::DZZ)[i], zz));
            }
        }
    }

    #[test]
    fn backward_matches_tape_parameter_gradient() {
        // loss = sum_i sum_c k_c(i) * channel_c(i) for fixed random weights k
        for head in [OutputHead::Identity, OutputHead::Softplus] {
            let p = MlpParams::init(11, &[3, 6, 5, 1], head).unwrap();
            let pts = random_points(7, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let (jets, trace) = forward(&p, &scaler(), &pts, Channels::ALL, Execution::Sequential).unwrap();
            let mut adj = jets.zeros_like();
            adj.data.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
            let grad = backward(&p, &trace, &adj, Execution::Sequential);

            let mut tape = Tape::new();
            let net = TapeNet::record(&mut tape, &p, true);
            let mut terms = Vec::new();
            for (i, x) in pts.iter().enumerate() {
                let (a, z, t) = (tape.input(x[0]), tape.input(x[1]), tape.input(x[2]));
                let out = net.eval(&mut tape, &scaler(), [a, z, t]);
                let d = tape.grad_vars(out, &[a, z, t]);
                let daa = tape.grad_vars(d[0], &[a])[0];
                let dzz = tape.grad_vars(d[1], &[z])[0];
                let vals = [out, d[0], d[1], d[2], daa, dzz];
                for (b, v) in vals.iter().enumerate() {
                    let k = adj.data[b * pts.len() + i];
                    terms.push(tape.scale(*v, k));
                }
            }
            let loss = tape.sum(&terms);
            let reference = tape.param_gradient(loss, &net.params()).unwrap();
            for (g, r) in grad.iter().zip(&reference) {
                assert!((g - r).abs() <= 1e-11 * r.abs().max(1.0), "{g} vs {r}");
            }
        }
    }

    #[test]
    fn chunking_and_modes_are_bitwise_stable() {
        let p = MlpParams::init(2, &[3, 16, 16, 1], OutputHead::Softplus).unwrap();
        let pts = random_points(3 * CHUNK + 17, 8);
        let ch = Channels::VALUE.with(Channel::DZZ).with(Channel::DT);
        let (j1, t1) = forward(&p, &scaler(), &pts, ch, Execution::Parallel).unwrap();
        let (j2, t2) = forward(&p, &scaler(), &pts, ch, Execution::Sequential).unwrap();
        assert_eq!(j1, j2);
        let mut adj = j1.zeros_like();
        adj.data.iter_mut().enumerate().for_each(|(i, x)| *x = (i as f64 * 0.37).sin());
        let g1 = backward(&p, &t1, &adj, Execution::Parallel);
        let g2 = backward(&p, &t2, &adj, Execution::Sequential);
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
        // the chunked result equals evaluating point by point
        for (i, x) in pts.iter().enumerate().step_by(97) {
            let single = evaluate(&p, &scaler(), &[*x], ch, Execution::Sequential).unwrap();
            assert!((single.get(Channel::DZZ)[0] - j1.get(Channel::DZZ)[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn out_of_domain_points_are_rejected() {
        let p = MlpParams::init(2, &[3, 4, 1], OutputHead::Identity).unwrap();
        let r = evaluate(&p, &scaler(), &[[0.0, 0.4, 1.0]], Channels::VALUE, Execution::Sequential);
        assert!(matches!(r, Err(AbhError::Domain { .. })));
    }
}
