//! Layer primitives: parameter holders that bind into a [`Graph`] per pass.
//!
//! A layer owns the master copy of its weights; `bind` inserts them as param
//! leaves of the current tape and returns lightweight ids used by `apply`.
//! Initialization is Kaiming-style uniform, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
//! drawn from a caller-provided seeded generator so construction is
//! deterministic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, VarId};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor, // [in, out]
    pub b: Tensor, // [out]
}

impl Linear {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            w: Tensor::uniform(&[fan_in, fan_out], bound, rng),
            b: Tensor::uniform(&[fan_out], bound, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> BoundLinear {
        BoundLinear {
            w: g.param(self.w.clone()),
            b: g.param(self.b.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: VarId,
    pub b: VarId,
}

impl BoundLinear {
    pub fn apply(&self, g: &mut Graph, x: VarId) -> VarId {
        let y = g.matmul(x, self.w);
        g.bias_add(y, self.b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: Tensor, // [cout, cin, k, k]
    pub b: Tensor, // [cout]
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = cin * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv {
            w: Tensor::uniform(&[cout, cin, k, k], bound, rng),
            b: Tensor::uniform(&[cout], bound, rng),
            stride,
            pad,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> BoundConv {
        BoundConv {
            w: g.param(self.w.clone()),
            b: g.param(self.b.clone()),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub w: VarId,
    pub b: VarId,
    pub stride: usize,
    pub pad: usize,
}

impl BoundConv {
    pub fn apply(&self, g: &mut Graph, x: VarId) -> VarId {
        g.conv2d(x, self.w, self.b, self.stride, self.pad)
    }
}

/// Transposed convolution targeting an explicit output size, so a decoder can
/// mirror whatever spatial dims its encoder produced.
#[derive(Debug, Clone)]
pub struct ConvTranspose {
    pub w: Tensor, // [cin, cout, k, k]
    pub b: Tensor, // [cout]
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvTranspose {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_h: usize,
        out_w: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        ConvTranspose {
            w: Tensor::uniform(&[cin, cout, k, k], bound, rng),
            b: Tensor::uniform(&[cout], bound, rng),
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> BoundConvTranspose {
        BoundConvTranspose {
            w: g.param(self.w.clone()),
            b: g.param(self.b.clone()),
            stride: self.stride,
            pad: self.pad,
            out_h: self.out_h,
            out_w: self.out_w,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConvTranspose {
    pub w: VarId,
    pub b: VarId,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl BoundConvTranspose {
    pub fn apply(&self, g: &mut Graph, x: VarId) -> VarId {
        g.conv_transpose2d(x, self.w, self.b, self.stride, self.pad, self.out_h, self.out_w)
    }
}

/// Forward-pass mode: dropout masks are drawn only in training mode, from the
/// step-scoped generator the trainer provides.
pub enum Mode<'r> {
    Eval,
    Train { rng: &'r mut ChaCha8Rng, dropout: f64 },
}

impl Mode<'_> {
    /// Inverted dropout: multiply by a Bernoulli(keep)/keep mask constant.
    /// The mask enters the tape as a constant, so gradients stay exact for
    /// the sampled subnetwork.
    pub fn dropout(&mut self, g: &mut Graph, x: VarId) -> VarId {
        match self {
            Mode::Eval => x,
            Mode::Train { rng, dropout } => {
                let p = *dropout;
                if p <= 0.0 {
                    return x;
                }
                let keep = 1.0 - p;
                let shape = g.value(x).shape().to_vec();
                let n: usize = shape.iter().product();
                let mask: Vec<f64> = (0..n)
                    .map(|_| {
                        if rng.gen_range(0.0..1.0) < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let m = g.constant(Tensor::new(shape, mask).unwrap());
                g.mul(x, m)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_init_is_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = Linear::new(8, 4, &mut r1);
        let b = Linear::new(8, 4, &mut r2);
        assert_eq!(a.w, b.w);
        assert_eq!(a.b, b.b);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_seeded() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0; 32]));
        let y = Mode::Eval.dropout(&mut g, x);
        assert_eq!(y, x);

        let make = |seed: u64| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_vec(vec![1.0; 32]));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mode = Mode::Train { rng: &mut rng, dropout: 0.5 };
            let y = mode.dropout(&mut g, x);
            g.value(y).data().to_vec()
        };
        assert_eq!(make(9), make(9));
        assert_ne!(make(9), make(10));
        // Inverted scaling: surviving units carry 1/keep.
        assert!(make(9).iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-12));
    }
}
