use crate::error::Result;
use crate::model::StemArch;
use crate::tensor::{Graph, Param, Rng, Tensor, Var};

/// Fully connected layer, `y = x·W + b` with `W` stored `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// Weights and bias uniform on `(-1/√in, 1/√in)`.
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Linear {
            weight: Param::new(Tensor::uniform(&[inputs, outputs], bound, rng)),
            bias: Param::new(Tensor::uniform(&[outputs], bound, rng)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Single-channel convolutional stem: conv → relu → 2×2 max-pool → flatten.
#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: Param,
    pub bias: Param,
    arch: StemArch,
}

impl Conv {
    pub fn new(arch: StemArch, rng: &mut Rng) -> Self {
        let k = arch.kernel;
        let bound = 1.0 / ((k * k) as f64).sqrt();
        Conv {
            kernel: Param::new(Tensor::uniform(&[1, 1, k, k], bound, rng)),
            bias: Param::new(Tensor::uniform(&[1], bound, rng)),
            arch,
        }
    }

    pub fn arch(&self) -> StemArch {
        self.arch
    }

    /// `N×1×H×W` → `N×flat_dim`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1..] != [1, self.arch.height, self.arch.width] {
            return Err(crate::Error::shape(
                "conv stem",
                &shape,
                &[0, 1, self.arch.height, self.arch.width],
            ));
        }
        let k = g.param(&self.kernel);
        let b = g.param(&self.bias);
        let c = g.conv2d_valid(x, k, b)?;
        let r = g.relu(c)?;
        let p = g.maxpool2(r)?;
        g.reshape(p, &[shape[0], self.arch.flat_dim()])
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.kernel, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.kernel, &mut self.bias]
    }
}
