use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Mutable view of one parameter tensor and its gradient.
pub struct Param<'a> {
    pub name: String,
    pub value: &'a mut Matrix,
    pub grad: &'a mut Matrix,
    /// L2 weight decay applies (linear weights only; biases and norm params are exempt)
    pub decay: bool,
    pub frozen: bool,
}

/// Fully connected layer `y = x·W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
    grad_weight: Matrix,
    grad_bias: Matrix,
    frozen: bool,
    input: Option<Matrix>,
}

impl Linear {
    /// Kaiming-uniform (fan-in, ReLU gain) weights, zero bias.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / in_dim.max(1) as f64).sqrt() as f32;
        let data = (0..in_dim * out_dim).map(|_| rng.uniform(-bound, bound)).collect();
        let weight = Matrix::from_vec(in_dim, out_dim, data).expect("sized by construction");
        Self::from_parts(weight, Matrix::zeros(1, out_dim)).expect("sized by construction")
    }

    pub fn from_parts(weight: Matrix, bias: Matrix) -> Result<Self> {
        bias.ensure_shape(1, weight.cols(), "linear bias")?;
        Ok(Self {
            grad_weight: Matrix::zeros(weight.rows(), weight.cols()),
            grad_bias: Matrix::zeros(1, weight.cols()),
            weight,
            bias,
            frozen: false,
            input: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight)?;
        y.add_row_broadcast(self.bias.data())?;
        Ok(y)
    }

    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let y = self.predict(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Matrix) -> Result<Matrix> {
        let x = self.input.take().ok_or_else(|| Error::Protocol("linear backward before forward".into()))?;
        if self.frozen {
            self.grad_weight.fill(0.0);
            self.grad_bias.fill(0.0);
        } else {
            self.grad_weight = x.matmul_tn(dy)?;
            self.grad_bias = Matrix::from_vec(1, dy.cols(), dy.column_sums())?;
        }
        dy.matmul_nt(&self.weight)
    }

    fn params<'a>(&'a mut self, prefix: &str, out: &mut Vec<Param<'a>>) {
        out.push(Param {
            name: format!("{prefix}weight"),
            value: &mut self.weight,
            grad: &mut self.grad_weight,
            decay: true,
            frozen: self.frozen,
        });
        out.push(Param {
            name: format!("{prefix}bias"),
            value: &mut self.bias,
            grad: &mut self.grad_bias,
            decay: false,
            frozen: self.frozen,
        });
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    output: Option<Matrix>,
}

impl Relu {
    fn forward(&mut self, x: &Matrix) -> Matrix {
        let y = x.map(|v| v.max(0.0));
        self.output = Some(y.clone());
        y
    }

    fn backward(&mut self, dy: &Matrix) -> Result<Matrix> {
        let y = self.output.take().ok_or_else(|| Error::Protocol("relu backward before forward".into()))?;
        dy.zip_with(&y, |g, out| if out > 0.0 { g } else { 0.0 })
    }
}

/// Inverted dropout: kept units are scaled by `1/(1-rate)` in training, so
/// evaluation is the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f32,
    rng: Rng,
    mask: Option<Option<Matrix>>,
}

impl Dropout {
    pub fn new(rate: f32, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        Self { rate, rng: Rng::new(seed), mask: None }
    }

    fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        if mode == Mode::Eval || self.rate == 0.0 {
            self.mask = Some(None);
            return Ok(x.clone());
        }
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let data = (0..x.len())
            .map(|_| if self.rng.unit_f64() < f64::from(keep) { scale } else { 0.0 })
            .collect();
        let mask = Matrix::from_vec(x.rows(), x.cols(), data)?;
        let y = x.zip_with(&mask, |a, m| a * m)?;
        self.mask = Some(Some(mask));
        Ok(y)
    }

    fn backward(&mut self, dy: &Matrix) -> Result<Matrix> {
        match self.mask.take() {
            None => Err(Error::Protocol("dropout backward before forward".into())),
            Some(None) => Ok(dy.clone()),
            Some(Some(mask)) => dy.zip_with(&mask, |g, m| g * m),
        }
    }
}

/// Per-row layer normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
    grad_gamma: Matrix,
    grad_beta: Matrix,
    frozen: bool,
    // normalized input and per-row 1/σ
    cache: Option<(Matrix, Vec<f64>)>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, dim, 1.0),
            beta: Matrix::zeros(1, dim),
            grad_gamma: Matrix::zeros(1, dim),
            grad_beta: Matrix::zeros(1, dim),
            frozen: false,
            cache: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.cols()
    }

    fn normalize(&self, x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        if x.cols() != self.dim() {
            return Err(Error::shape(format!(
                "layernorm over {} features got {}",
                self.dim(),
                x.cols()
            )));
        }
        let d = x.cols() as f64;
        let mut xhat = Matrix::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        for (i, row) in x.iter_rows().enumerate() {
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d;
            let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for (o, &v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = ((f64::from(v) - mean) * inv) as f32;
            }
            inv_std.push(inv);
        }
        Ok((xhat, inv_std))
    }

    fn affine(&self, xhat: &Matrix) -> Matrix {
        let mut y = xhat.clone();
        let (g, b) = (self.gamma.data(), self.beta.data());
        for i in 0..y.rows() {
            for ((v, &gj), &bj) in y.row_mut(i).iter_mut().zip(g).zip(b) {
                *v = *v * gj + bj;
            }
        }
        y
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let (xhat, _) = self.normalize(x)?;
        Ok(self.affine(&xhat))
    }

    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let (xhat, inv_std) = self.normalize(x)?;
        let y = self.affine(&xhat);
        self.cache = Some((xhat, inv_std));
        Ok(y)
    }

    fn backward(&mut self, dy: &Matrix) -> Result<Matrix> {
        let (xhat, inv_std) =
            self.cache.take().ok_or_else(|| Error::Protocol("layernorm backward before forward".into()))?;
        let d = xhat.cols();
        let mut dx = Matrix::zeros(dy.rows(), d);
        let mut g_gamma = vec![0.0f64; d];
        let mut g_beta = vec![0.0f64; d];
        let gamma = self.gamma.data();
        for i in 0..dy.rows() {
            let (dyr, xr) = (dy.row(i), xhat.row(i));
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for j in 0..d {
                let g = f64::from(dyr[j]) * f64::from(gamma[j]);
                sum_g += g;
                sum_gx += g * f64::from(xr[j]);
                g_gamma[j] += f64::from(dyr[j]) * f64::from(xr[j]);
                g_beta[j] += f64::from(dyr[j]);
            }
            let n = d as f64;
            for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
                let g = f64::from(dyr[j]) * f64::from(gamma[j]);
                *out = (inv_std[i] / n * (n * g - sum_g - f64::from(xr[j]) * sum_gx)) as f32;
            }
        }
        if self.frozen {
            self.grad_gamma.fill(0.0);
            self.grad_beta.fill(0.0);
        } else {
            self.grad_gamma = Matrix::from_vec(1, d, g_gamma.into_iter().map(|v| v as f32).collect())?;
            self.grad_beta = Matrix::from_vec(1, d, g_beta.into_iter().map(|v| v as f32).collect())?;
        }
        Ok(dx)
    }

    fn params<'a>(&'a mut self, prefix: &str, out: &mut Vec<Param<'a>>) {
        out.push(Param {
            name: format!("{prefix}gamma"),
            value: &mut self.gamma,
            grad: &mut self.grad_gamma,
            decay: false,
            frozen: self.frozen,
        });
        out.push(Param {
            name: format!("{prefix}beta"),
            value: &mut self.beta,
            grad: &mut self.grad_beta,
            decay: false,
            frozen: self.frozen,
        });
    }
}

/// `proj(x) + branch(x)`; `proj` is the identity when absent.
#[derive(Debug, Clone)]
pub struct Residual {
    pub proj: Option<Linear>,
    pub branch: Stack,
}

impl Residual {
    fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let skip = match &self.proj {
            Some(p) => p.predict(x)?,
            None => x.clone(),
        };
        skip.add(&self.branch.predict(x)?)
    }

    fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        let skip = match &mut self.proj {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        skip.add(&self.branch.forward(x, mode)?)
    }

    fn backward(&mut self, dy: &Matrix) -> Result<Matrix> {
        let d_branch = self.branch.backward(dy)?;
        let d_skip = match &mut self.proj {
            Some(p) => p.backward(dy)?,
            None => dy.clone(),
        };
        d_skip.add(&d_branch)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Linear(Linear),
    Relu(Relu),
    Dropout(Dropout),
    LayerNorm(LayerNorm),
    Residual(Box<Residual>),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "linear",
            Layer::Relu(_) => "relu",
            Layer::Dropout(_) => "dropout",
            Layer::LayerNorm(_) => "layernorm",
            Layer::Residual(_) => "residual",
        }
    }

    fn predict(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Layer::Linear(l) => l.predict(x),
            Layer::Relu(_) => Ok(x.map(|v| v.max(0.0))),
            Layer::Dropout(_) => Ok(x.clone()),
            Layer::LayerNorm(l) => l.predict(x),
            Layer::Residual(r) => r.predict(x),
        }
    }

    fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Relu(r) => Ok(r.forward(x)),
            Layer::Dropout(d) => d.forward(x, mode),
            Layer::LayerNorm(l) => l.forward(x),
            Layer::Residual(r) => r.forward(x, mode),
        }
    }

    fn backward(&mut self, dy: &Matrix) -> Result<Matrix> {
        match self {
            Layer::Linear(l) => l.backward(dy),
            Layer::Relu(r) => r.backward(dy),
            Layer::Dropout(d) => d.backward(dy),
            Layer::LayerNorm(l) => l.backward(dy),
            Layer::Residual(r) => r.backward(dy),
        }
    }

    fn set_frozen(&mut self, frozen: bool) {
        match self {
            Layer::Linear(l) => l.frozen = frozen,
            Layer::LayerNorm(l) => l.frozen = frozen,
            Layer::Residual(r) => {
                if let Some(p) = &mut r.proj {
                    p.frozen = frozen;
                }
                r.branch.set_frozen(frozen);
            }
            Layer::Relu(_) | Layer::Dropout(_) => {}
        }
    }

    fn params<'a>(&'a mut self, prefix: &str, out: &mut Vec<Param<'a>>) {
        match self {
            Layer::Linear(l) => l.params(prefix, out),
            Layer::LayerNorm(l) => l.params(prefix, out),
            Layer::Residual(r) => {
                if let Some(p) = &mut r.proj {
                    p.params(&format!("{prefix}proj."), out);
                }
                r.branch.collect_params(&format!("{prefix}branch."), out);
            }
            Layer::Relu(_) | Layer::Dropout(_) => {}
        }
    }
}

/// Ordered sequence of layers trained as one unit.
#[derive(Debug, Clone, Default)]
pub struct Stack {
    layers: Vec<Layer>,
    frozen: bool,
}

impl Stack {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers, frozen: false }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        for layer in &mut self.layers {
            layer.set_frozen(frozen);
        }
    }

    /// Eval-mode forward pass without caching; usable through a shared reference.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.predict(&h)?;
        }
        h.ensure_finite("forward output")?;
        Ok(h)
    }

    /// Forward pass caching activations for a following [`Stack::backward`].
    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, mode)?;
        }
        h.ensure_finite("forward output")?;
        Ok(h)
    }

    /// Backpropagates `dy`, storing parameter gradients and returning `∂L/∂x`.
    /// Frozen layers end with exactly zero parameter gradients.
    pub fn backward(&mut self, dy: &Matrix) -> Result<Matrix> {
        let mut g = dy.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn params(&mut self) -> Vec<Param<'_>> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<Param<'a>>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.params(&format!("{prefix}{i}."), out);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params() {
            p.grad.fill(0.0);
        }
    }

    /// Named copies of every parameter tensor, in optimizer order.
    pub fn snapshot(&mut self) -> Vec<(String, Matrix)> {
        self.params().into_iter().map(|p| (p.name, p.value.clone())).collect()
    }

    /// Restores parameters saved by [`Stack::snapshot`]; names and shapes must match.
    pub fn restore(&mut self, saved: &[(String, Matrix)]) -> Result<()> {
        let mut params = self.params();
        if params.len() != saved.len() {
            return Err(Error::shape(format!(
                "restoring {} tensors into a stack with {}",
                saved.len(),
                params.len()
            )));
        }
        for (p, (name, value)) in params.iter_mut().zip(saved) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(Error::shape(format!(
                    "parameter {} {:?} does not match saved {name} {:?}",
                    p.name,
                    p.value.shape(),
                    value.shape()
                )));
            }
            *p.value = value.clone();
        }
        Ok(())
    }

    pub fn num_params(&mut self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}
