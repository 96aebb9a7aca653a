//! Residual multilayer perceptron with exact reverse-mode gradients.
//!
//! Layout of the flat parameter vector, in order:
//!
//! - input projection `W_in` (`input_dim x hidden`), `b_in` (`hidden`)
//! - per block: `W1`, `b1`, `W2`, `b2` (`hidden x hidden`, `hidden` each)
//! - output projection `W_out` (`hidden x output_dim`), `b_out` (`output_dim`)
//!
//! Weight matrices are row-major with the *input* index first, so a batch
//! `X` (`n x in`, row-major) maps to `X W + b`. A block computes
//! `x + relu(x W1 + b1) W2 + b2`. Outputs are raw (no output nonlinearity).

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::scalar::{gemm, Op, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
}

/// Dimensions of a [`ResidualMlp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpShape {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
}

impl MlpShape {
    pub fn new(input_dim: usize, output_dim: usize, hidden_dim: usize, num_blocks: usize) -> Self {
        Self { input_dim, output_dim, hidden_dim, num_blocks }
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden_dim;
        self.input_dim * h + h + self.num_blocks * (2 * h * h + 2 * h) + h * self.output_dim + self.output_dim
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid(format!("network dims must be positive: {self:?}")));
        }
        Ok(())
    }

    pub(crate) fn layout(&self) -> ParamLayout {
        let h = self.hidden_dim;
        let mut at = 0;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let w_in = take(self.input_dim * h);
        let b_in = take(h);
        let blocks = (0..self.num_blocks)
            .map(|_| BlockLayout { w1: take(h * h), b1: take(h), w2: take(h * h), b2: take(h) })
            .collect();
        let w_out = take(h * self.output_dim);
        let b_out = take(self.output_dim);
        ParamLayout { w_in, b_in, blocks, w_out, b_out }
    }
}

type Span = std::ops::Range<usize>;

#[derive(Debug, Clone)]
pub(crate) struct BlockLayout {
    pub w1: Span,
    pub b1: Span,
    pub w2: Span,
    pub b2: Span,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamLayout {
    pub w_in: Span,
    pub b_in: Span,
    pub blocks: Vec<BlockLayout>,
    pub w_out: Span,
    pub b_out: Span,
}

/// A residual MLP with a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMlp<T> {
    shape: MlpShape,
    activation: Activation,
    params: Vec<T>,
}

/// Activations cached by [`ResidualMlp::forward_traced`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    rows: usize,
    inputs: Vec<T>,
    /// Residual stream entering each block, plus the final stream (`num_blocks + 1` entries).
    streams: Vec<Vec<T>>,
    /// Pre-activation of the first linear map inside each block.
    pre_acts: Vec<Vec<T>>,
    outputs: Vec<T>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn outputs(&self) -> &[T] {
        &self.outputs
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Which gradients a backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    ParamsAndInputs,
    InputsOnly,
}

/// Gradients of `sum(upstream * outputs)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer<T> {
    /// Same layout as the network parameters; empty for [`GradTarget::InputsOnly`].
    pub param_grads: Vec<T>,
    /// Row-major `rows x input_dim`.
    pub input_grads: Vec<T>,
}

impl<T: Real> GradientBuffer<T> {
    pub fn zeros(shape: &MlpShape, rows: usize) -> Self {
        Self {
            param_grads: vec![T::zero(); shape.param_count()],
            input_grads: vec![T::zero(); rows * shape.input_dim],
        }
    }

    pub fn clear(&mut self) {
        self.param_grads.iter_mut().for_each(|g| *g = T::zero());
        self.input_grads.iter_mut().for_each(|g| *g = T::zero());
    }
}

impl<T: Real> ResidualMlp<T> {
    /// All-zero network.
    pub fn zeros(shape: MlpShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self { shape, activation: Activation::Relu, params: vec![T::zero(); shape.param_count()] })
    }

    pub fn from_params(shape: MlpShape, params: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if params.len() != shape.param_count() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                shape.param_count(),
                params.len()
            )));
        }
        if let Some(index) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite { context: "network parameters", index });
        }
        Ok(Self { shape, activation: Activation::Relu, params })
    }

    /// Fan-in scaled uniform initialization for ReLU stacks. The second map of
    /// each block is shrunk by `1/sqrt(2 * num_blocks)` so the residual stream
    /// variance stays bounded with depth. Biases start at zero.
    pub fn init<R: Rng + ?Sized>(shape: MlpShape, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(shape)?;
        let layout = shape.layout();
        let h = shape.hidden_dim;
        let fill = |params: &mut [T], span: &Span, fan_in: usize, gain: f64, rng: &mut R| {
            let limit = gain * (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            for p in &mut params[span.clone()] {
                *p = T::lit(dist.sample(rng));
            }
        };
        fill(&mut net.params, &layout.w_in, shape.input_dim, 1.0, rng);
        let block_gain = 1.0 / (2.0 * shape.num_blocks.max(1) as f64).sqrt();
        for block in &layout.blocks {
            fill(&mut net.params, &block.w1, h, 1.0, rng);
            fill(&mut net.params, &block.w2, h, block_gain, rng);
        }
        // Output layer uses plain fan-in scaling without the ReLU gain.
        fill(&mut net.params, &layout.w_out, h, 1.0 / 2f64.sqrt(), rng);
        Ok(net)
    }

    pub fn shape(&self) -> MlpShape {
        self.shape
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<T> {
        self.params
    }

    /// Converts the parameters to another element type.
    pub fn cast<U: Real>(&self) -> ResidualMlp<U> {
        ResidualMlp {
            shape: self.shape,
            activation: self.activation,
            params: self.params.iter().map(|p| U::lit(p.as_f64())).collect(),
        }
    }

    fn check_rows(&self, inputs: &[T]) -> Result<usize> {
        let d = self.shape.input_dim;
        if inputs.len() % d != 0 {
            return Err(Error::shape(format!(
                "input buffer of length {} is not a multiple of input_dim {d}",
                inputs.len()
            )));
        }
        if let Some(index) = inputs.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { context: "network inputs", index });
        }
        Ok(inputs.len() / d)
    }

    /// Evaluates a row-major batch and returns `rows x output_dim` outputs.
    pub fn forward(&self, inputs: &[T]) -> Result<Vec<T>> {
        Ok(self.forward_traced(inputs)?.outputs)
    }

    /// Forward pass that keeps the activations needed by [`Self::backward`].
    pub fn forward_traced(&self, inputs: &[T]) -> Result<ForwardTrace<T>> {
        let rows = self.check_rows(inputs)?;
        let MlpShape { input_dim, output_dim, hidden_dim: h, .. } = self.shape;
        let layout = self.shape.layout();
        let p = &self.params;

        let mut stream = broadcast_rows(&p[layout.b_in.clone()], rows);
        gemm(rows, input_dim, h, inputs, Op::N, &p[layout.w_in.clone()], Op::N, T::one(), &mut stream);

        let mut streams = Vec::with_capacity(layout.blocks.len() + 1);
        let mut pre_acts = Vec::with_capacity(layout.blocks.len());
        let mut hidden = vec![T::zero(); rows * h];
        for block in &layout.blocks {
            let mut pre = broadcast_rows(&p[block.b1.clone()], rows);
            gemm(rows, h, h, &stream, Op::N, &p[block.w1.clone()], Op::N, T::one(), &mut pre);
            for (a, &z) in hidden.iter_mut().zip(&pre) {
                *a = relu(z);
            }
            let mut next = stream.clone();
            add_rows(&mut next, &p[block.b2.clone()]);
            gemm(rows, h, h, &hidden, Op::N, &p[block.w2.clone()], Op::N, T::one(), &mut next);
            streams.push(std::mem::replace(&mut stream, next));
            pre_acts.push(pre);
        }

        let mut outputs = broadcast_rows(&p[layout.b_out.clone()], rows);
        gemm(rows, h, output_dim, &stream, Op::N, &p[layout.w_out.clone()], Op::N, T::one(), &mut outputs);
        streams.push(stream);

        Ok(ForwardTrace { rows, inputs: inputs.to_vec(), streams, pre_acts, outputs })
    }

    /// Reverse-mode gradients of `sum(upstream * outputs)` for the traced batch.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        upstream: &[T],
        target: GradTarget,
    ) -> Result<GradientBuffer<T>> {
        let MlpShape { input_dim, output_dim, hidden_dim: h, .. } = self.shape;
        let rows = trace.rows;
        if upstream.len() != rows * output_dim || trace.inputs.len() != rows * input_dim {
            return Err(Error::shape(format!(
                "upstream gradient has {} values for {rows} rows of {output_dim} outputs",
                upstream.len()
            )));
        }
        if trace.streams.len() != self.shape.num_blocks + 1 {
            return Err(Error::shape("trace was produced by a different network"));
        }
        if let Some(index) = upstream.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite { context: "upstream gradients", index });
        }
        let layout = self.shape.layout();
        let p = &self.params;
        let with_params = target == GradTarget::ParamsAndInputs;
        let mut pg = if with_params { vec![T::zero(); p.len()] } else { Vec::new() };

        let final_stream = &trace.streams[self.shape.num_blocks];
        if with_params {
            gemm(h, rows, output_dim, final_stream, Op::T, upstream, Op::N, T::zero(), &mut pg[layout.w_out.clone()]);
            column_sums(upstream, output_dim, &mut pg[layout.b_out.clone()]);
        }
        let mut d_stream = vec![T::zero(); rows * h];
        gemm(rows, output_dim, h, upstream, Op::N, &p[layout.w_out.clone()], Op::T, T::zero(), &mut d_stream);

        let mut d_hidden = vec![T::zero(); rows * h];
        let mut hidden = vec![T::zero(); rows * h];
        for (bi, block) in layout.blocks.iter().enumerate().rev() {
            let pre = &trace.pre_acts[bi];
            let block_in = &trace.streams[bi];
            if with_params {
                for (a, &z) in hidden.iter_mut().zip(pre) {
                    *a = relu(z);
                }
                gemm(h, rows, h, &hidden, Op::T, &d_stream, Op::N, T::zero(), &mut pg[block.w2.clone()]);
                column_sums(&d_stream, h, &mut pg[block.b2.clone()]);
            }
            gemm(rows, h, h, &d_stream, Op::N, &p[block.w2.clone()], Op::T, T::zero(), &mut d_hidden);
            for (g, &z) in d_hidden.iter_mut().zip(pre) {
                if z <= T::zero() {
                    *g = T::zero();
                }
            }
            if with_params {
                gemm(h, rows, h, block_in, Op::T, &d_hidden, Op::N, T::zero(), &mut pg[block.w1.clone()]);
                column_sums(&d_hidden, h, &mut pg[block.b1.clone()]);
            }
            // Skip path carries d_stream through unchanged.
            gemm(rows, h, h, &d_hidden, Op::N, &p[block.w1.clone()], Op::T, T::one(), &mut d_stream);
        }

        if with_params {
            gemm(input_dim, rows, h, &trace.inputs, Op::T, &d_stream, Op::N, T::zero(), &mut pg[layout.w_in.clone()]);
            column_sums(&d_stream, h, &mut pg[layout.b_in.clone()]);
        }
        let mut input_grads = vec![T::zero(); rows * input_dim];
        gemm(rows, h, input_dim, &d_stream, Op::N, &p[layout.w_in.clone()], Op::T, T::zero(), &mut input_grads);

        Ok(GradientBuffer { param_grads: pg, input_grads })
    }

    /// Convenience wrapper that recomputes the forward pass.
    pub fn gradients(&self, inputs: &[T], upstream: &[T], target: GradTarget) -> Result<GradientBuffer<T>> {
        let trace = self.forward_traced(inputs)?;
        self.backward(&trace, upstream, target)
    }

    /// Mutable view of the two weight matrices and biases of one block.
    pub fn block_params_mut(&mut self, block: usize) -> Option<&mut [T]> {
        let layout = self.shape.layout();
        let b = layout.blocks.get(block)?;
        Some(&mut self.params[b.w1.start..b.b2.end])
    }
}

#[inline]
fn relu<T: Real>(z: T) -> T {
    if z > T::zero() {
        z
    } else {
        T::zero()
    }
}

fn broadcast_rows<T: Real>(row: &[T], rows: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(row.len() * rows);
    for _ in 0..rows {
        out.extend_from_slice(row);
    }
    out
}

fn add_rows<T: Real>(buf: &mut [T], row: &[T]) {
    for chunk in buf.chunks_exact_mut(row.len()) {
        for (x, &b) in chunk.iter_mut().zip(row) {
            *x = *x + b;
        }
    }
}

fn column_sums<T: Real>(buf: &[T], cols: usize, out: &mut [T]) {
    out.iter_mut().for_each(|o| *o = T::zero());
    for chunk in buf.chunks_exact(cols) {
        for (o, &x) in out.iter_mut().zip(chunk) {
            *o = *o + x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(shape: MlpShape, seed: u64) -> ResidualMlp<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = ResidualMlp::<f64>::init(shape, &mut rng).unwrap();
        // Nonzero biases so every bias path is exercised.
        let dist = Uniform::new(-0.1, 0.1);
        let layout = shape.layout();
        for span in std::iter::once(&layout.b_in)
            .chain(layout.blocks.iter().flat_map(|b| [&b.b1, &b.b2]))
            .chain(std::iter::once(&layout.b_out))
        {
            for p in &mut net.params_mut()[span.clone()] {
                *p = dist.sample(&mut rng);
            }
        }
        net
    }

    #[test]
    fn parameter_count_formula() {
        for (i, o, h, b) in [(3, 5, 128, 8), (68, 3, 16, 2), (1, 1, 1, 0), (67, 5, 32, 3)] {
            let s = MlpShape::new(i, o, h, b);
            let net = ResidualMlp::<f32>::zeros(s).unwrap();
            assert_eq!(net.params().len(), i * h + h + b * (2 * h * h + 2 * h) + h * o + o);
            let layout = s.layout();
            assert_eq!(layout.b_out.end, s.param_count());
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = ResidualMlp::<f64>::zeros(MlpShape::new(4, 5, 8, 2)).unwrap();
        let out = net.forward(&[1.0, -2.0, 3.0, 0.5, 7.0, 7.0, 7.0, 7.0]).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.iter().all(|&y| y == 0.0));
    }

    #[test]
    fn zeroed_block_is_identity_on_the_stream() {
        let shape = MlpShape::new(3, 2, 6, 1);
        let mut with_block = random_net(shape, 7);
        with_block.block_params_mut(0).unwrap().iter_mut().for_each(|p| *p = 0.0);
        let x = [0.3, -1.2, 0.8, 2.0, 0.1, -0.4];
        let trace = with_block.forward_traced(&x).unwrap();
        assert_eq!(trace.streams[0], trace.streams[1]);

        // Same network without the block gives the same output.
        let layout = shape.layout();
        let no_block_shape = MlpShape::new(3, 2, 6, 0);
        let mut params = with_block.params()[layout.w_in.start..layout.b_in.end].to_vec();
        params.extend_from_slice(&with_block.params()[layout.w_out.start..]);
        let plain = ResidualMlp::from_params(no_block_shape, params).unwrap();
        assert_eq!(plain.forward(&x).unwrap(), with_block.forward(&x).unwrap());
    }

    #[test]
    fn forward_is_deterministic() {
        let net = random_net(MlpShape::new(5, 3, 16, 2), 3).cast::<f32>();
        let x: Vec<f32> = (0..40).map(|i| (i as f32 * 0.7).sin()).collect();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn row_results_do_not_depend_on_batch_composition() {
        let net = random_net(MlpShape::new(4, 5, 32, 3), 11).cast::<f32>();
        let x: Vec<f32> = (0..4 * 37).map(|i| (i as f32 * 0.31).cos()).collect();
        let all = net.forward(&x).unwrap();
        for r in [0, 5, 36] {
            let single = net.forward(&x[r * 4..r * 4 + 4]).unwrap();
            assert_eq!(&all[r * 5..r * 5 + 5], &single[..]);
        }
    }

    #[test]
    fn input_shape_is_checked() {
        let net = ResidualMlp::<f64>::zeros(MlpShape::new(3, 1, 4, 1)).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Shape(_))));
        assert!(matches!(net.forward(&[1.0, f64::NAN, 0.0]), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = random_net(MlpShape::new(3, 2, 8, 2), 5);
        let x = [0.1, 0.2, 0.3, -0.5, 0.4, 0.9];
        let g = net.gradients(&x, &[0.0; 4], GradTarget::ParamsAndInputs).unwrap();
        assert!(g.param_grads.iter().chain(&g.input_grads).all(|&v| v == 0.0));
    }

    #[test]
    fn linear_net_input_gradient_is_transpose_product() {
        // 0 blocks: y = (x W_in + b_in) W_out + b_out, so dy/dx = W_in W_out.
        let shape = MlpShape::new(3, 2, 4, 0);
        let net = random_net(shape, 9);
        let layout = shape.layout();
        let w_in = &net.params()[layout.w_in.clone()];
        let w_out = &net.params()[layout.w_out.clone()];
        let g = [0.7, -1.3];
        let grads = net.gradients(&[0.5, -0.2, 1.0], &g, GradTarget::InputsOnly).unwrap();
        assert!(grads.param_grads.is_empty());
        for i in 0..3 {
            let mut want = 0.0;
            for k in 0..4 {
                for o in 0..2 {
                    want += w_in[i * 4 + k] * w_out[k * 2 + o] * g[o];
                }
            }
            assert!((grads.input_grads[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_upstream_is_rejected() {
        let net = random_net(MlpShape::new(2, 1, 4, 1), 1);
        let trace = net.forward_traced(&[0.0, 1.0]).unwrap();
        assert!(net.backward(&trace, &[f64::INFINITY], GradTarget::InputsOnly).is_err());
        assert!(net.backward(&trace, &[1.0, 2.0], GradTarget::InputsOnly).is_err());
    }
}
