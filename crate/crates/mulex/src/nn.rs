//! Minimal multi-head convolutional Q-network with hand-written reverse-mode
//! gradients and RMSProp updates.
//!
//! The network is one tower per reward signal — a convolutional body plus a
//! dense head, all towers sharing the same architecture but none of the
//! parameters. Keeping the towers disjoint means each policy's value function
//! is shaped only by its own reward: a bonus signal can never leak into the
//! task policy through shared features. Convolutions are valid (no padding)
//! and use im2col + gemm. Everything is generic over f32/f64: training runs
//! in single precision, gradient checks in double.

use crate::env::{Env, EnvConfig, Observation, Variant};
use ndarray::{Array1, Array2, Array4};
use num_traits::{Float, NumCast};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub trait Scalar:
    Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + NumCast
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    const WIDTH: u8;
}
impl Scalar for f32 {
    const WIDTH: u8 = 4;
}
impl Scalar for f64 {
    const WIDTH: u8 = 8;
}

pub fn cast<S: Scalar>(v: f64) -> S {
    <S as NumCast>::from(v).unwrap()
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize },
    Relu,
    Flatten,
    Dense { out: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input as (channels, rows, cols); channels = 4 stacked frames.
    pub input: (usize, usize, usize),
    pub body: Vec<LayerSpec>,
    pub head_hidden: usize,
    pub num_actions: usize,
    pub num_heads: usize,
}

impl NetworkSpec {
    /// Body used for plain-palette frames: two convs, 16 and 32 kernels.
    pub fn plain(rows: usize, cols: usize, num_heads: usize) -> NetworkSpec {
        NetworkSpec {
            input: (4, rows, cols),
            body: vec![
                LayerSpec::Conv { out_channels: 16, kernel: 3, stride: 2 },
                LayerSpec::Relu,
                LayerSpec::Conv { out_channels: 32, kernel: 3, stride: 2 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
            ],
            head_hidden: 64,
            num_actions: 4,
            num_heads,
        }
    }

    /// Textured frames are 8x larger; one extra 32-kernel conv, bigger first
    /// filter.
    pub fn textured(rows: usize, cols: usize, num_heads: usize) -> NetworkSpec {
        NetworkSpec {
            input: (4, rows, cols),
            body: vec![
                LayerSpec::Conv { out_channels: 16, kernel: 5, stride: 4 },
                LayerSpec::Relu,
                LayerSpec::Conv { out_channels: 32, kernel: 3, stride: 2 },
                LayerSpec::Relu,
                LayerSpec::Conv { out_channels: 32, kernel: 3, stride: 2 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
            ],
            head_hidden: 64,
            num_actions: 4,
            num_heads,
        }
    }

    pub fn for_env(cfg: &EnvConfig, num_heads: usize) -> NetworkSpec {
        let (rows, cols) = Env::frame_shape(cfg);
        match cfg.variant {
            Variant::Textured => NetworkSpec::textured(rows, cols, num_heads),
            _ => NetworkSpec::plain(rows, cols, num_heads),
        }
    }

    /// Feature dimension entering the heads, and shape after each body layer.
    fn body_shapes(&self) -> Result<Vec<Shape>, NnError> {
        let mut shapes = vec![Shape::Chw(self.input.0, self.input.1, self.input.2)];
        for spec in &self.body {
            let prev = *shapes.last().unwrap();
            let next = match (spec, prev) {
                (LayerSpec::Conv { out_channels, kernel, stride }, Shape::Chw(_, h, w)) => {
                    if h < *kernel || w < *kernel {
                        return Err(NnError::ShapeMismatch(format!(
                            "conv kernel {kernel} larger than input {h}x{w}"
                        )));
                    }
                    Shape::Chw(*out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1)
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::Flatten, Shape::Chw(c, h, w)) => Shape::Flat(c * h * w),
                (LayerSpec::Flatten, Shape::Flat(d)) => Shape::Flat(d),
                (LayerSpec::Dense { out }, Shape::Flat(_)) => Shape::Flat(*out),
                (spec, shape) => {
                    return Err(NnError::ShapeMismatch(format!(
                        "layer {spec:?} cannot follow shape {shape:?}"
                    )))
                }
            };
            shapes.push(next);
        }
        match shapes.last().unwrap() {
            Shape::Flat(_) => Ok(shapes),
            s => Err(NnError::ShapeMismatch(format!("body must end flat, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Chw(usize, usize, usize),
    Flat(usize),
}

/// Activation tensor flowing between layers.
#[derive(Debug, Clone)]
pub enum Act<S: Scalar> {
    A4(Array4<S>),
    A2(Array2<S>),
}

impl<S: Scalar> Act<S> {
    fn a4(&self) -> &Array4<S> {
        match self {
            Act::A4(x) => x,
            Act::A2(_) => panic!("expected 4-d activation"),
        }
    }
    fn a2(&self) -> &Array2<S> {
        match self {
            Act::A2(x) => x,
            Act::A4(_) => panic!("expected 2-d activation"),
        }
    }
}

#[derive(Debug, Clone)]
enum Layer<S: Scalar> {
    Conv { w: Array4<S>, b: Array1<S>, stride: usize },
    Relu,
    Flatten,
    Dense { w: Array2<S>, b: Array1<S> },
}

struct LayerCache<S: Scalar> {
    input: Act<S>,
    cols: Option<Array2<S>>,
}

impl<S: Scalar> Layer<S> {
    fn forward(&self, x: &Act<S>, want_cache: bool) -> (Act<S>, Option<LayerCache<S>>) {
        let (out, cols) = match self {
            Layer::Conv { w, b, stride } => {
                let (y, cols) = conv_forward(x.a4(), w, b, *stride);
                (Act::A4(y), Some(cols))
            }
            Layer::Relu => {
                let out = match x {
                    Act::A4(v) => Act::A4(v.mapv(|e| e.max(S::zero()))),
                    Act::A2(v) => Act::A2(v.mapv(|e| e.max(S::zero()))),
                };
                (out, None)
            }
            Layer::Flatten => {
                let v = x.a4();
                let (bsz, c, h, w) = v.dim();
                let flat = v
                    .to_shape((bsz, c * h * w))
                    .expect("flatten reshape")
                    .to_owned();
                (Act::A2(flat), None)
            }
            Layer::Dense { w, b } => {
                let mut y = x.a2().dot(&w.t());
                y += b;
                (Act::A2(y), None)
            }
        };
        let cache = want_cache.then(|| LayerCache {
            input: x.clone(),
            cols,
        });
        (out, cache)
    }

    /// Returns grad wrt input; appends (dW, db) for parameterized layers to
    /// `sink` keyed by this layer's parameter index.
    fn backward(&self, cache: &LayerCache<S>, grad_out: &Act<S>, dw_sink: &mut [Vec<S>]) -> Act<S> {
        match self {
            Layer::Conv { w, stride, .. } => {
                let (dx, dw, db) = conv_backward(
                    cache.input.a4(),
                    cache.cols.as_ref().expect("conv cache"),
                    w,
                    grad_out.a4(),
                    *stride,
                );
                accumulate(&mut dw_sink[0], dw.as_slice().unwrap());
                accumulate(&mut dw_sink[1], db.as_slice().unwrap());
                Act::A4(dx)
            }
            Layer::Relu => match (&cache.input, grad_out) {
                (Act::A4(x), Act::A4(g)) => {
                    let mut dx = g.clone();
                    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &xi| {
                        if xi <= S::zero() {
                            *d = S::zero();
                        }
                    });
                    Act::A4(dx)
                }
                (Act::A2(x), Act::A2(g)) => {
                    let mut dx = g.clone();
                    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &xi| {
                        if xi <= S::zero() {
                            *d = S::zero();
                        }
                    });
                    Act::A2(dx)
                }
                _ => panic!("relu grad rank mismatch"),
            },
            Layer::Flatten => {
                let shape = cache.input.a4().dim();
                let dx = grad_out
                    .a2()
                    .to_shape(shape)
                    .expect("unflatten reshape")
                    .to_owned();
                Act::A4(dx)
            }
            Layer::Dense { w, .. } => {
                let x = cache.input.a2();
                let g = grad_out.a2();
                let dw = g.t().dot(x);
                let db = g.sum_axis(ndarray::Axis(0));
                accumulate(&mut dw_sink[0], dw.as_slice().unwrap());
                accumulate(&mut dw_sink[1], db.as_slice().unwrap());
                Act::A2(g.dot(w))
            }
        }
    }

    fn params(&self) -> Vec<&[S]> {
        match self {
            Layer::Conv { w, b, .. } => vec![w.as_slice().unwrap(), b.as_slice().unwrap()],
            Layer::Dense { w, b } => vec![w.as_slice().unwrap(), b.as_slice().unwrap()],
            _ => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut [S]> {
        match self {
            Layer::Conv { w, b, .. } => vec![w.as_slice_mut().unwrap(), b.as_slice_mut().unwrap()],
            Layer::Dense { w, b } => vec![w.as_slice_mut().unwrap(), b.as_slice_mut().unwrap()],
            _ => vec![],
        }
    }
}

fn accumulate<S: Scalar>(sink: &mut Vec<S>, src: &[S]) {
    if sink.is_empty() {
        sink.extend_from_slice(src);
    } else {
        debug_assert_eq!(sink.len(), src.len());
        for (d, &s) in sink.iter_mut().zip(src) {
            *d = *d + s;
        }
    }
}

fn conv_forward<S: Scalar>(
    x: &Array4<S>,
    w: &Array4<S>,
    b: &Array1<S>,
    stride: usize,
) -> (Array4<S>, Array2<S>) {
    let (bsz, c, h, wd) = x.dim();
    let (oc, _, k, _) = w.dim();
    let oh = (h - k) / stride + 1;
    let ow = (wd - k) / stride + 1;
    let cols = im2col(x, k, stride, oh, ow);
    let wmat = w.to_shape((oc, c * k * k)).expect("weight reshape");
    let y = wmat.dot(&cols); // [oc, bsz*oh*ow]
    let mut out = Array4::zeros((bsz, oc, oh, ow));
    for bi in 0..bsz {
        for o in 0..oc {
            for r in 0..oh {
                for q in 0..ow {
                    out[[bi, o, r, q]] = y[[o, bi * oh * ow + r * ow + q]] + b[o];
                }
            }
        }
    }
    (out, cols)
}

fn conv_backward<S: Scalar>(
    x: &Array4<S>,
    cols: &Array2<S>,
    w: &Array4<S>,
    grad_out: &Array4<S>,
    stride: usize,
) -> (Array4<S>, Array2<S>, Array1<S>) {
    let (bsz, c, h, wd) = x.dim();
    let (oc, _, k, _) = w.dim();
    let (_, _, oh, ow) = grad_out.dim();
    let mut gmat = Array2::zeros((oc, bsz * oh * ow));
    for bi in 0..bsz {
        for o in 0..oc {
            for r in 0..oh {
                for q in 0..ow {
                    gmat[[o, bi * oh * ow + r * ow + q]] = grad_out[[bi, o, r, q]];
                }
            }
        }
    }
    let dw = gmat.dot(&cols.t()); // [oc, c*k*k]
    let db = gmat.sum_axis(ndarray::Axis(1));
    let wmat = w.to_shape((oc, c * k * k)).expect("weight reshape");
    let dcols = wmat.t().dot(&gmat); // [c*k*k, bsz*oh*ow]
    let mut dx = Array4::zeros((bsz, c, h, wd));
    for bi in 0..bsz {
        for ci in 0..c {
            for kr in 0..k {
                for kc in 0..k {
                    let row = ci * k * k + kr * k + kc;
                    for r in 0..oh {
                        for q in 0..ow {
                            dx[[bi, ci, r * stride + kr, q * stride + kc]] =
                                dx[[bi, ci, r * stride + kr, q * stride + kc]]
                                    + dcols[[row, bi * oh * ow + r * ow + q]];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn im2col<S: Scalar>(x: &Array4<S>, k: usize, stride: usize, oh: usize, ow: usize) -> Array2<S> {
    let (bsz, c, _, _) = x.dim();
    let mut cols = Array2::zeros((c * k * k, bsz * oh * ow));
    for bi in 0..bsz {
        for ci in 0..c {
            for kr in 0..k {
                for kc in 0..k {
                    let row = ci * k * k + kr * k + kc;
                    for r in 0..oh {
                        for q in 0..ow {
                            cols[[row, bi * oh * ow + r * ow + q]] =
                                x[[bi, ci, r * stride + kr, q * stride + kc]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Multi-head Q-network: one independent tower (conv body + dense-hidden +
/// dense-out head) per reward signal.
#[derive(Debug, Clone)]
pub struct QNetwork<S: Scalar> {
    spec: NetworkSpec,
    towers: Vec<Vec<Layer<S>>>,
}

pub struct ForwardCache<S: Scalar> {
    /// Which towers the forward pass ran, in output order.
    towers: Vec<usize>,
    caches: Vec<Vec<LayerCache<S>>>,
    batch: usize,
}

/// Parameter gradients, flattened in the same order as `param_slices`.
#[derive(Debug, Clone)]
pub struct Gradients<S: Scalar> {
    pub flat: Vec<Vec<S>>,
}

impl<S: Scalar> QNetwork<S> {
    /// Fan-in scaled uniform init for weights, zero biases; each tower's
    /// output layer starts at exactly zero so initial Q-values are 0.
    /// Towers draw their parameters in order, so tower 0 of a multi-head
    /// network is bit-identical to a one-head network built from the same
    /// rng state.
    pub fn init(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Result<QNetwork<S>, NnError> {
        let shapes = spec.body_shapes()?;
        let feat = match *shapes.last().unwrap() {
            Shape::Flat(d) => d,
            _ => unreachable!(),
        };
        let mut towers = Vec::new();
        for _ in 0..spec.num_heads {
            let mut tower = Vec::new();
            for (i, ls) in spec.body.iter().enumerate() {
                tower.push(make_layer(ls, shapes[i], rng, false)?);
            }
            tower.push(make_layer(&LayerSpec::Dense { out: spec.head_hidden }, Shape::Flat(feat), rng, false)?);
            tower.push(Layer::Relu);
            tower.push(make_layer(
                &LayerSpec::Dense { out: spec.num_actions },
                Shape::Flat(spec.head_hidden),
                rng,
                true,
            )?);
            towers.push(tower);
        }
        Ok(QNetwork {
            spec: spec.clone(),
            towers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> (usize, usize, usize) {
        self.spec.input
    }

    /// Forward pass for all heads, recording caches for `backward`.
    pub fn forward(&self, input: &Array4<S>) -> Result<(Vec<Array2<S>>, ForwardCache<S>), NnError> {
        let all: Vec<usize> = (0..self.towers.len()).collect();
        self.forward_towers(input, &all)
    }

    /// Forward pass through the listed towers only; outputs follow the order
    /// of `heads`. Training passes that touch one head skip the others.
    pub fn forward_towers(
        &self,
        input: &Array4<S>,
        heads: &[usize],
    ) -> Result<(Vec<Array2<S>>, ForwardCache<S>), NnError> {
        self.check_input(input)?;
        let mut outputs = Vec::with_capacity(heads.len());
        let mut caches = Vec::with_capacity(heads.len());
        for &h in heads {
            let tower = self
                .towers
                .get(h)
                .ok_or_else(|| NnError::ArchitectureMismatch(format!("no head {h}")))?;
            let mut act = Act::A4(input.clone());
            let mut tower_caches = Vec::new();
            for layer in tower {
                let (next, cache) = layer.forward(&act, true);
                tower_caches.push(cache.unwrap());
                act = next;
            }
            outputs.push(act.a2().clone());
            caches.push(tower_caches);
        }
        Ok((
            outputs,
            ForwardCache {
                towers: heads.to_vec(),
                caches,
                batch: input.dim().0,
            },
        ))
    }

    /// Cache-free forward of a single tower (used for acting).
    pub fn forward_head(&self, input: &Array4<S>, head: usize) -> Result<Array2<S>, NnError> {
        self.check_input(input)?;
        let tower = self
            .towers
            .get(head)
            .ok_or_else(|| NnError::ArchitectureMismatch(format!("no head {head}")))?;
        let mut act = Act::A4(input.clone());
        for layer in tower {
            act = layer.forward(&act, false).0;
        }
        Ok(act.a2().clone())
    }

    /// Exact reverse-mode gradients of the recorded forward pass. One output
    /// gradient per tower the pass ran (batch x num_actions), in the cache's
    /// tower order; towers not in the cache get zero gradients.
    pub fn backward(
        &self,
        cache: &ForwardCache<S>,
        head_grads: &[Array2<S>],
    ) -> Result<Gradients<S>, NnError> {
        if head_grads.len() != cache.towers.len() {
            return Err(NnError::ShapeMismatch(format!(
                "expected {} head gradients, got {}",
                cache.towers.len(),
                head_grads.len()
            )));
        }
        let mut grads = Gradients {
            flat: self
                .param_slices()
                .iter()
                .map(|p| vec![S::zero(); p.len()])
                .collect(),
        };
        // Per-layer parameter start indices in the flat (tower-major) order.
        let mut starts: Vec<Vec<usize>> = Vec::with_capacity(self.towers.len());
        let mut idx = 0usize;
        for tower in &self.towers {
            let mut ts = Vec::with_capacity(tower.len());
            for l in tower {
                ts.push(idx);
                idx += l.params().len();
            }
            starts.push(ts);
        }
        for (ci, &hi) in cache.towers.iter().enumerate() {
            let g = &head_grads[ci];
            if g.dim() != (cache.batch, self.spec.num_actions) {
                return Err(NnError::ShapeMismatch(format!(
                    "head {hi} gradient has shape {:?}",
                    g.dim()
                )));
            }
            let tower = &self.towers[hi];
            let mut grad = Act::A2(g.clone());
            for (li, (layer, lcache)) in tower.iter().zip(&cache.caches[ci]).enumerate().rev() {
                let start = starts[hi][li];
                let np = layer.params().len();
                grad = layer.backward(lcache, &grad, &mut grads.flat[start..start + np]);
            }
        }
        Ok(grads)
    }

    pub fn param_slices(&self) -> Vec<&[S]> {
        let mut v = Vec::new();
        for tower in &self.towers {
            for l in tower {
                v.extend(l.params());
            }
        }
        v
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        let mut v = Vec::new();
        for tower in &mut self.towers {
            for l in tower {
                v.extend(l.params_mut());
            }
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Indices into the flat parameter list owned by head `head`'s tower.
    pub fn head_param_range(&self, head: usize) -> std::ops::Range<usize> {
        let mut idx = 0usize;
        for (h, tower) in self.towers.iter().enumerate() {
            let n = head_param_count(tower);
            if h == head {
                return idx..idx + n;
            }
            idx += n;
        }
        idx..idx
    }

    fn check_input(&self, input: &Array4<S>) -> Result<(), NnError> {
        let (_, c, h, w) = input.dim();
        if (c, h, w) != self.spec.input {
            return Err(NnError::ShapeMismatch(format!(
                "input {:?} does not match spec {:?}",
                (c, h, w),
                self.spec.input
            )));
        }
        Ok(())
    }
}

fn head_param_count<S: Scalar>(tower: &[Layer<S>]) -> usize {
    tower.iter().map(|l| l.params().len()).sum()
}

fn make_layer<S: Scalar>(
    spec: &LayerSpec,
    in_shape: Shape,
    rng: &mut ChaCha8Rng,
    zero_init: bool,
) -> Result<Layer<S>, NnError> {
    let uniform = |rng: &mut ChaCha8Rng, fan_in: usize| -> S {
        let bound = 1.0 / (fan_in as f64).sqrt();
        cast::<S>(rng.random_range(-bound..bound))
    };
    Ok(match (spec, in_shape) {
        (LayerSpec::Conv { out_channels, kernel, stride }, Shape::Chw(c, _, _)) => {
            let fan_in = c * kernel * kernel;
            let w = if zero_init {
                Array4::zeros((*out_channels, c, *kernel, *kernel))
            } else {
                Array4::from_shape_fn((*out_channels, c, *kernel, *kernel), |_| uniform(rng, fan_in))
            };
            Layer::Conv {
                w,
                b: Array1::zeros(*out_channels),
                stride: *stride,
            }
        }
        (LayerSpec::Dense { out }, Shape::Flat(d)) => {
            let w = if zero_init {
                Array2::zeros((*out, d))
            } else {
                Array2::from_shape_fn((*out, d), |_| uniform(rng, d))
            };
            Layer::Dense {
                w,
                b: Array1::zeros(*out),
            }
        }
        (LayerSpec::Relu, _) => Layer::Relu,
        (LayerSpec::Flatten, _) => Layer::Flatten,
        (spec, shape) => {
            return Err(NnError::ShapeMismatch(format!(
                "cannot build layer {spec:?} on shape {shape:?}"
            )))
        }
    })
}

/// Copy all parameters of `src` into `dst` (identical architectures).
pub fn copy_parameters<S: Scalar>(src: &QNetwork<S>, dst: &mut QNetwork<S>) -> Result<(), NnError> {
    if src.spec != dst.spec {
        return Err(NnError::ArchitectureMismatch(
            "source and destination specs differ".into(),
        ));
    }
    let src_params = src.param_slices();
    for (d, s) in dst.param_slices_mut().into_iter().zip(src_params) {
        d.copy_from_slice(s);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// RMSProp
// ---------------------------------------------------------------------------

/// RMSProp constants used throughout the experiments (learning rate is a
/// searched hyperparameter).
pub const RMSPROP_DECAY: f64 = 0.95;
pub const RMSPROP_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct RmsProp<S: Scalar> {
    pub learning_rate: S,
    pub decay: S,
    pub epsilon: S,
    avg: Vec<Vec<S>>,
}

impl<S: Scalar> RmsProp<S> {
    pub fn new(learning_rate: f64) -> RmsProp<S> {
        RmsProp {
            learning_rate: cast(learning_rate),
            decay: cast(RMSPROP_DECAY),
            epsilon: cast(RMSPROP_EPSILON),
            avg: Vec::new(),
        }
    }

    /// avg <- rho*avg + (1-rho)*g^2; p <- p - lr*g/sqrt(avg + eps).
    pub fn step(&mut self, params: &mut [&mut [S]], grads: &Gradients<S>) -> Result<(), NnError> {
        if self.avg.is_empty() {
            self.avg = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
        }
        if params.len() != grads.flat.len() || params.len() != self.avg.len() {
            return Err(NnError::ShapeMismatch("optimizer/parameter count".into()));
        }
        let one = S::one();
        for ((p, g), avg) in params.iter_mut().zip(&grads.flat).zip(&mut self.avg) {
            if p.len() != g.len() {
                return Err(NnError::ShapeMismatch("gradient length".into()));
            }
            for ((pv, &gv), av) in p.iter_mut().zip(g).zip(avg.iter_mut()) {
                if !gv.is_finite() {
                    return Err(NnError::NonFinite("gradient"));
                }
                *av = self.decay * *av + (one - self.decay) * gv * gv;
                *pv = *pv - self.learning_rate * gv / (*av + self.epsilon).sqrt();
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Observation batching
// ---------------------------------------------------------------------------

/// Stack observations into a [batch, 4, rows, cols] input tensor.
pub fn obs_batch<S: Scalar>(observations: &[&Observation]) -> Result<Array4<S>, NnError> {
    if observations.is_empty() {
        return Err(NnError::ShapeMismatch("empty observation batch".into()));
    }
    let (rows, cols) = {
        let f = &observations[0].frames[0];
        (f.rows(), f.cols())
    };
    let mut out = Array4::zeros((observations.len(), 4, rows, cols));
    for (bi, obs) in observations.iter().enumerate() {
        for (fi, frame) in obs.frames.iter().enumerate() {
            if frame.pixels.dim() != (rows, cols) {
                return Err(NnError::ShapeMismatch("ragged frame dimensions".into()));
            }
            for r in 0..rows {
                for c in 0..cols {
                    out[[bi, fi, r, c]] = cast::<S>(frame.pixels[[r, c]] as f64);
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoints: flat binary layout with a shape header
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"MULEXNET";
const CHECKPOINT_VERSION: u32 = 1;

/// Serialize the network: magic, version, scalar width, JSON spec, then the
/// ordered raw little-endian parameter buffers (lengths prefixed).
pub fn save_checkpoint<S: Scalar>(net: &QNetwork<S>, path: &std::path::Path) -> Result<(), NnError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(S::WIDTH);
    let spec_json = serde_json::to_vec(&net.spec).expect("spec serializes");
    buf.extend_from_slice(&(spec_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&spec_json);
    let params = net.param_slices();
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&(p.len() as u64).to_le_bytes());
        for &v in p {
            let v64: f64 = NumCast::from(v).unwrap();
            if S::WIDTH == 4 {
                buf.extend_from_slice(&(v64 as f32).to_le_bytes());
            } else {
                buf.extend_from_slice(&v64.to_le_bytes());
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &std::path::Path) -> Result<QNetwork<S>, NnError> {
    let data = std::fs::read(path)?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8], NnError> {
        if *cur + n > data.len() {
            return Err(NnError::Corrupt("truncated checkpoint".into()));
        }
        let s = &data[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    if take(&mut cur, 8)? != CHECKPOINT_MAGIC {
        return Err(NnError::Corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Corrupt(format!("unsupported version {version}")));
    }
    let width = take(&mut cur, 1)?[0];
    if width != S::WIDTH {
        return Err(NnError::ArchitectureMismatch(format!(
            "checkpoint stores {width}-byte scalars, expected {}",
            S::WIDTH
        )));
    }
    let spec_len = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
    let spec: NetworkSpec = serde_json::from_slice(take(&mut cur, spec_len)?)
        .map_err(|e| NnError::Corrupt(format!("spec: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = QNetwork::<S>::init(&spec, &mut rng)?;
    let n_params = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
    {
        let mut slices = net.param_slices_mut();
        if n_params != slices.len() {
            return Err(NnError::Corrupt("parameter count mismatch".into()));
        }
        for slice in slices.iter_mut() {
            let len = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
            if len != slice.len() {
                return Err(NnError::Corrupt("parameter shape mismatch".into()));
            }
            for v in slice.iter_mut() {
                *v = if S::WIDTH == 4 {
                    cast::<S>(f32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as f64)
                } else {
                    cast::<S>(f64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()))
                };
            }
        }
    }
    Ok(net)
}

/// Greedy Q-values for a single observation and head.
pub fn q_values_single<S: Scalar>(
    net: &QNetwork<S>,
    obs: &Observation,
    head: usize,
) -> Result<Vec<S>, NnError> {
    let input = obs_batch::<S>(&[obs])?;
    let q = net.forward_head(&input, head)?;
    Ok(q.row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2, Array4};

    fn tiny_spec(heads: usize) -> NetworkSpec {
        NetworkSpec {
            input: (2, 7, 6),
            body: vec![
                LayerSpec::Conv { out_channels: 3, kernel: 3, stride: 2 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
            ],
            head_hidden: 5,
            num_actions: 4,
            num_heads: heads,
        }
    }

    fn randomize_params<S: Scalar>(net: &mut QNetwork<S>, rng: &mut ChaCha8Rng) {
        for slice in net.param_slices_mut() {
            for v in slice.iter_mut() {
                *v = cast::<S>(rng.random_range(-0.5..0.5));
            }
        }
    }

    fn rand_input<S: Scalar>(spec: &NetworkSpec, batch: usize, rng: &mut ChaCha8Rng) -> Array4<S> {
        let (c, h, w) = spec.input;
        Array4::from_shape_fn((batch, c, h, w), |_| cast::<S>(rng.random_range(-1.0..1.0)))
    }

    // -- independent scalar-by-scalar reference ---------------------------

    fn ref_conv(x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>, stride: usize) -> Array4<f64> {
        let (bsz, c, h, wd) = x.dim();
        let (oc, _, k, _) = w.dim();
        let (oh, ow) = ((h - k) / stride + 1, (wd - k) / stride + 1);
        let mut y = Array4::zeros((bsz, oc, oh, ow));
        for bi in 0..bsz {
            for o in 0..oc {
                for r in 0..oh {
                    for q in 0..ow {
                        let mut acc = b[o];
                        for ci in 0..c {
                            for kr in 0..k {
                                for kc in 0..k {
                                    acc += x[[bi, ci, r * stride + kr, q * stride + kc]]
                                        * w[[o, ci, kr, kc]];
                                }
                            }
                        }
                        y[[bi, o, r, q]] = acc;
                    }
                }
            }
        }
        y
    }

    fn ref_dense(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
        let (bsz, din) = x.dim();
        let (dout, _) = w.dim();
        let mut y = Array2::zeros((bsz, dout));
        for bi in 0..bsz {
            for o in 0..dout {
                let mut acc = b[o];
                for i in 0..din {
                    acc += x[[bi, i]] * w[[o, i]];
                }
                y[[bi, o]] = acc;
            }
        }
        y
    }

    /// Reference forward of the tiny spec using the flat parameter list.
    fn reference_forward(
        spec: &NetworkSpec,
        params: &[&[f64]],
        input: &Array4<f64>,
        head: usize,
    ) -> Array2<f64> {
        let (c, _, _) = spec.input;
        let (oc, k, stride) = match spec.body[0] {
            LayerSpec::Conv { out_channels, kernel, stride } => (out_channels, kernel, stride),
            _ => unreachable!(),
        };
        // Tower-major flat layout: 6 slices per tower (conv w/b, hidden
        // w/b, out w/b).
        let base = head * 6;
        let w1 = Array4::from_shape_vec((oc, c, k, k), params[base].to_vec()).unwrap();
        let b1 = Array1::from_vec(params[base + 1].to_vec());
        let conv = ref_conv(input, &w1, &b1, stride).mapv(|v| v.max(0.0));
        let (bsz, cc, hh, ww) = conv.dim();
        let mut flat = Array2::zeros((bsz, cc * hh * ww));
        for bi in 0..bsz {
            let mut i = 0;
            for ci in 0..cc {
                for r in 0..hh {
                    for q in 0..ww {
                        flat[[bi, i]] = conv[[bi, ci, r, q]];
                        i += 1;
                    }
                }
            }
        }
        let feat = cc * hh * ww;
        let wh = Array2::from_shape_vec((spec.head_hidden, feat), params[base + 2].to_vec()).unwrap();
        let bh = Array1::from_vec(params[base + 3].to_vec());
        let hidden = ref_dense(&flat, &wh, &bh).mapv(|v| v.max(0.0));
        let wo = Array2::from_shape_vec((spec.num_actions, spec.head_hidden), params[base + 4].to_vec())
            .unwrap();
        let bo = Array1::from_vec(params[base + 5].to_vec());
        ref_dense(&hidden, &wo, &bo)
    }

    #[test]
    fn forward_matches_scalar_reference() {
        let spec = tiny_spec(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = QNetwork::<f64>::init(&spec, &mut rng).unwrap();
        randomize_params(&mut net, &mut rng);
        let input = rand_input::<f64>(&spec, 3, &mut rng);
        let (outs, _) = net.forward(&input).unwrap();
        let params = net.param_slices();
        for head in 0..2 {
            let expect = reference_forward(&spec, &params, &input, head);
            for (a, b) in outs[head].iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_is_pure_and_zero_init_heads_give_zero_q() {
        let spec = tiny_spec(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = QNetwork::<f64>::init(&spec, &mut rng).unwrap();
        let input = rand_input::<f64>(&spec, 2, &mut rng);
        let (a, _) = net.forward(&input).unwrap();
        let (b, _) = net.forward(&input).unwrap();
        assert_eq!(a, b);
        for out in &a {
            assert!(out.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let spec = tiny_spec(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = QNetwork::<f64>::init(&spec, &mut rng).unwrap();
        let bad = Array4::<f64>::zeros((1, 2, 5, 5));
        assert!(matches!(net.forward(&bad), Err(NnError::ShapeMismatch(_))));
    }

    /// Loss L = sum_h <G_h, out_h>; analytic dL/dtheta vs central finite
    /// differences at double precision.
    fn finite_difference_check(seed: u64, step: f64, tol: f64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = rng.random_range(1..=3);
        let spec = NetworkSpec {
            input: (2, rng.random_range(6..=8), rng.random_range(6..=8)),
            body: vec![
                LayerSpec::Conv {
                    out_channels: rng.random_range(2..=3),
                    kernel: 3,
                    stride: rng.random_range(1..=2),
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
            ],
            head_hidden: rng.random_range(3..=6),
            num_actions: 4,
            num_heads: heads,
        };
        let mut net = QNetwork::<f64>::init(&spec, &mut rng).unwrap();
        randomize_params(&mut net, &mut rng);
        let batch = rng.random_range(1..=3);
        let input = rand_input::<f64>(&spec, batch, &mut rng);
        let gs: Vec<Array2<f64>> = (0..heads)
            .map(|_| Array2::from_shape_fn((batch, 4), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let loss = |net: &QNetwork<f64>| -> f64 {
            let (outs, _) = net.forward(&input).unwrap();
            outs.iter()
                .zip(&gs)
                .map(|(o, g)| (o * g).sum())
                .sum()
        };
        let (_, cache) = net.forward(&input).unwrap();
        let analytic = net.backward(&cache, &gs).unwrap();
        let mut max_rel = 0.0f64;
        let n_slices = analytic.flat.len();
        for si in 0..n_slices {
            for pi in 0..analytic.flat[si].len() {
                let orig = net.param_slices()[si][pi];
                net.param_slices_mut()[si][pi] = orig + step;
                let lp = loss(&net);
                net.param_slices_mut()[si][pi] = orig - step;
                let lm = loss(&net);
                net.param_slices_mut()[si][pi] = orig;
                let fd = (lp - lm) / (2.0 * step);
                let a = analytic.flat[si][pi];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
                max_rel = max_rel.max(rel);
                assert!(rel < tol, "slice {si} param {pi}: analytic {a} vs fd {fd}");
            }
        }
        max_rel
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..6 {
            finite_difference_check(seed, 1e-5, 1e-4);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradients() {
        let spec = tiny_spec(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = QNetwork::<f64>::init(&spec, &mut rng).unwrap();
        randomize_params(&mut net, &mut rng);
        let input = rand_input::<f64>(&spec, 2, &mut rng);
        let (_, cache) = net.forward(&input).unwrap();
        let zeros = vec![Array2::zeros((2, 4)); 2];
        let grads = net.backward(&cache, &zeros).unwrap();
        assert!(grads.flat.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn masked_head_receives_no_gradient() {
        let spec = tiny_spec(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = QNetwork::<f64>::init(&spec, &mut rng).unwrap();
        randomize_params(&mut net, &mut rng);
        let input = rand_input::<f64>(&spec, 2, &mut rng);
        let (_, cache) = net.forward(&input).unwrap();
        let g1 = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0));
        let grads = net.backward(&cache, &[Array2::zeros((2, 4)), g1.clone()]).unwrap();
        let head0 = net.head_param_range(0);
        for si in head0 {
            assert!(grads.flat[si].iter().all(|&g| g == 0.0));
        }
        // Body gradient equals the single-head network's body gradient.
        let head1 = net.head_param_range(1);
        assert!(grads.flat[head1].iter().flatten().any(|&g| g != 0.0));
    }

    #[test]
    fn head_isolation() {
        let spec = tiny_spec(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = QNetwork::<f64>::init(&spec, &mut rng).unwrap();
        randomize_params(&mut net, &mut rng);
        let input = rand_input::<f64>(&spec, 2, &mut rng);
        let before = net.forward_head(&input, 0).unwrap();
        let range = net.head_param_range(1);
        for si in range {
            for v in net.param_slices_mut()[si].iter_mut() {
                *v += 10.0;
            }
        }
        let after = net.forward_head(&input, 0).unwrap();
        assert_eq!(before, after);
        assert_ne!(
            net.forward_head(&input, 1).unwrap(),
            before
        );
    }

    #[test]
    fn copy_parameters_is_deep_and_idempotent() {
        let spec = tiny_spec(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut src = QNetwork::<f64>::init(&spec, &mut rng).unwrap();
        randomize_params(&mut src, &mut rng);
        let mut dst = QNetwork::<f64>::init(&spec, &mut rng).unwrap();
        copy_parameters(&src, &mut dst).unwrap();
        let input = rand_input::<f64>(&spec, 2, &mut rng);
        assert_eq!(
            src.forward(&input).unwrap().0,
            dst.forward(&input).unwrap().0
        );
        copy_parameters(&src, &mut dst).unwrap();
        let before = dst.forward(&input).unwrap().0;
        // Mutating the source must not affect the copy.
        for v in src.param_slices_mut()[0].iter_mut() {
            *v += 1.0;
        }
        assert_eq!(dst.forward(&input).unwrap().0, before);
        let other = QNetwork::<f64>::init(&tiny_spec(3), &mut rng).unwrap();
        let mut dst2 = dst.clone();
        assert!(copy_parameters(&other, &mut dst2).is_err());
    }

    #[test]
    fn rmsprop_single_step_hand_arithmetic() {
        // One scalar parameter p=1, g=0.5, lr=0.1, rho=0.9, eps=1e-5.
        let mut opt = RmsProp::<f64>::new(0.1);
        opt.decay = 0.9;
        let mut p = vec![1.0f64];
        let grads = Gradients { flat: vec![vec![0.5f64]] };
        {
            let mut params: Vec<&mut [f64]> = vec![&mut p];
            opt.step(&mut params, &grads).unwrap();
        }
        let avg = 0.1 * 0.25;
        let expect = 1.0 - 0.1 * 0.5 / (avg + 1e-5).sqrt();
        assert!((p[0] - expect).abs() < 1e-15, "{} vs {expect}", p[0]);
        // Second identical gradient: the moving average grows, so the step
        // shrinks; verify against the closed form.
        let p1 = p[0];
        {
            let mut params: Vec<&mut [f64]> = vec![&mut p];
            opt.step(&mut params, &grads).unwrap();
        }
        let avg2 = 0.9 * avg + 0.1 * 0.25;
        let expect2 = p1 - 0.1 * 0.5 / (avg2 + 1e-5).sqrt();
        assert!((p[0] - expect2).abs() < 1e-15);
        assert!((p1 - p[0]).abs() < (1.0 - p1).abs(), "second step not smaller");
    }

    #[test]
    fn rmsprop_zero_gradient_keeps_parameters() {
        let mut opt = RmsProp::<f64>::new(0.1);
        let mut p = vec![1.0, -2.0, 3.0];
        let grads = Gradients { flat: vec![vec![0.0; 3]] };
        let mut params: Vec<&mut [f64]> = vec![&mut p];
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn rmsprop_rejects_non_finite_gradient() {
        let mut opt = RmsProp::<f64>::new(0.1);
        let mut p = vec![1.0];
        let grads = Gradients { flat: vec![vec![f64::NAN]] };
        let mut params: Vec<&mut [f64]> = vec![&mut p];
        assert!(matches!(
            opt.step(&mut params, &grads),
            Err(NnError::NonFinite(_))
        ));
    }

    #[test]
    fn obs_batch_layout() {
        let mut env = Env::new(EnvConfig::new(5, Variant::Standard, 0)).unwrap();
        let obs = env.reset();
        let (obs2, _, _) = env.step(crate::env::Action::Down).unwrap();
        let batch = obs_batch::<f32>(&[&obs, &obs2]).unwrap();
        assert_eq!(batch.dim(), (2, 4, 14, 13));
        assert_eq!(batch[[0, 0, 1, 1]], obs.frames[0].pixels[[1, 1]]);
        assert_eq!(batch[[1, 3, 2, 1]], obs2.frames[3].pixels[[2, 1]]);
    }

    #[test]
    fn checkpoint_roundtrip_and_width_mismatch() {
        let spec = tiny_spec(2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = QNetwork::<f32>::init(&spec, &mut rng).unwrap();
        randomize_params(&mut net, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        save_checkpoint(&net, &path).unwrap();
        let back: QNetwork<f32> = load_checkpoint(&path).unwrap();
        let a = net.param_slices();
        let b = back.param_slices();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(NnError::ArchitectureMismatch(_))
        ));
        std::fs::write(&path, b"junk").unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }

    #[test]
    fn network_specs_for_env_variants() {
        let plain = NetworkSpec::for_env(&EnvConfig::new(5, Variant::Standard, 0), 2);
        assert_eq!(plain.input, (4, 14, 13));
        assert_eq!(plain.body.len(), 5);
        let tex = NetworkSpec::for_env(&EnvConfig::new(5, Variant::Textured, 0), 1);
        assert_eq!(tex.input, (4, 112, 104));
        assert_eq!(tex.body.len(), 7);
        // Both bodies validate against their input shapes.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(QNetwork::<f32>::init(&plain, &mut rng).is_ok());
        assert!(QNetwork::<f32>::init(&tex, &mut rng).is_ok());
    }
}
