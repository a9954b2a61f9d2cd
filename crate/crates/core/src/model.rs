//! Feed-forward encoder, linear group classifier and per-group expert heads,
//! with hand-written forward and backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

/// Affine layer `y = W x + b` with `W` stored as `out x in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weights: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    fn glorot(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Dense {
            weights: Matrix::from_vec(output, input, data).expect("sized by construction"),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "layer expects {} inputs, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let mut out = Matrix::zeros(x.rows(), self.output_dim());
        for (r, xr) in x.iter_rows().enumerate() {
            let row = out.row_mut(r);
            for (o, v) in row.iter_mut().enumerate() {
                *v = self.bias[o] + dot(self.weights.row(o), xr);
            }
        }
        Ok(out)
    }

    pub fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        (0..self.output_dim())
            .map(|o| self.bias[o] + dot(self.weights.row(o), x))
            .collect()
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the layer input.
    fn backward(&self, input: &Matrix, upstream: &Matrix, grads: &mut Dense) -> Matrix {
        let mut dx = Matrix::zeros(input.rows(), self.input_dim());
        for r in 0..input.rows() {
            let xr = input.row(r);
            let ur = upstream.row(r);
            for (o, &u) in ur.iter().enumerate() {
                if u == 0.0 {
                    continue;
                }
                grads.bias[o] += u;
                let gw = grads.weights.row_mut(o);
                for (g, &x) in gw.iter_mut().zip(xr) {
                    *g += u * x;
                }
                let w = self.weights.row(o);
                for (d, &wv) in dx.row_mut(r).iter_mut().zip(w) {
                    *d += u * wv;
                }
            }
        }
        dx
    }

    fn zeros_like(&self) -> Dense {
        Dense::zeros(self.input_dim(), self.output_dim())
    }
}

/// Which block of the model a parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Encoder,
    Classifier,
    Expert(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: Vec<Dense>,
    pub classifier: Dense,
    pub experts: Vec<Dense>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub num_groups: usize,
}

impl Architecture {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        embed_dim: usize,
        num_groups: usize,
    ) -> Result<Self> {
        if input_dim == 0 || embed_dim == 0 || num_groups == 0 || hidden_dims.contains(&0) {
            return Err(Error::InvalidDims(format!(
                "input {input_dim}, hidden {hidden_dims:?}, embed {embed_dim}, groups {num_groups}"
            )));
        }
        Ok(Architecture {
            input_dim,
            hidden_dims,
            embed_dim,
            num_groups,
        })
    }
}

pub fn init_params(
    seed: u64,
    input_dim: usize,
    hidden_dims: &[usize],
    embed_dim: usize,
    num_groups: usize,
) -> Result<ModelParams> {
    let arch = Architecture::new(input_dim, hidden_dims.to_vec(), embed_dim, num_groups)?;
    Ok(ModelParams::init(&arch, seed))
}

impl ModelParams {
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![arch.input_dim];
        dims.extend_from_slice(&arch.hidden_dims);
        dims.push(arch.embed_dim);
        let encoder = dims
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], &mut rng))
            .collect();
        let classifier = Dense::glorot(arch.embed_dim, arch.num_groups, &mut rng);
        let experts = (0..arch.num_groups)
            .map(|_| Dense::glorot(arch.embed_dim, 1, &mut rng))
            .collect();
        ModelParams {
            encoder,
            classifier,
            experts,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim(),
            hidden_dims: self.encoder[..self.encoder.len() - 1]
                .iter()
                .map(Dense::output_dim)
                .collect(),
            embed_dim: self.embed_dim(),
            num_groups: self.num_groups(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.last().map_or(0, Dense::output_dim)
    }

    pub fn num_groups(&self) -> usize {
        self.experts.len()
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            encoder: self.encoder.iter().map(Dense::zeros_like).collect(),
            classifier: self.classifier.zeros_like(),
            experts: self.experts.iter().map(Dense::zeros_like).collect(),
        }
    }

    /// Every parameter tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(Part, &[f64])> {
        let mut out = Vec::new();
        for l in &self.encoder {
            out.push((Part::Encoder, l.weights.as_slice()));
            out.push((Part::Encoder, l.bias.as_slice()));
        }
        out.push((Part::Classifier, self.classifier.weights.as_slice()));
        out.push((Part::Classifier, self.classifier.bias.as_slice()));
        for (g, e) in self.experts.iter().enumerate() {
            out.push((Part::Expert(g), e.weights.as_slice()));
            out.push((Part::Expert(g), e.bias.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(Part, &mut [f64])> {
        let mut out = Vec::new();
        for l in &mut self.encoder {
            out.push((Part::Encoder, l.weights.as_mut_slice()));
            out.push((Part::Encoder, l.bias.as_mut_slice()));
        }
        out.push((Part::Classifier, self.classifier.weights.as_mut_slice()));
        out.push((Part::Classifier, self.classifier.bias.as_mut_slice()));
        for (g, e) in self.experts.iter_mut().enumerate() {
            out.push((Part::Expert(g), e.weights.as_mut_slice()));
            out.push((Part::Expert(g), e.bias.as_mut_slice()));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|((pa, ta), (pb, tb))| pa == pb && ta.len() == tb.len())
    }
}

/// Layer inputs and pre-activations kept from [`encode`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    z: Matrix,
}

impl ForwardCache {
    pub fn embeddings(&self) -> &Matrix {
        &self.z
    }

    pub fn batch_size(&self) -> usize {
        self.z.rows()
    }
}

pub fn encode(params: &ModelParams, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
    let mut inputs = Vec::with_capacity(params.encoder.len());
    let mut pre = Vec::with_capacity(params.encoder.len());
    let mut h = x.clone();
    let last = params.encoder.len() - 1;
    for (l, layer) in params.encoder.iter().enumerate() {
        let a = layer.forward(&h)?;
        inputs.push(h);
        h = a.clone();
        if l < last {
            h.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        pre.push(a);
    }
    Ok((h.clone(), ForwardCache { inputs, pre, z: h }))
}

/// Encoder output for a single sample, without keeping a cache.
pub fn encode_row(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "model expects {} features, got {}",
            params.input_dim(),
            x.len()
        )));
    }
    let last = params.encoder.len() - 1;
    let mut h = x.to_vec();
    for (l, layer) in params.encoder.iter().enumerate() {
        h = layer.forward_row(&h);
        if l < last {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    Ok(h)
}

pub fn classify(params: &ModelParams, z: &Matrix) -> Result<Matrix> {
    params.classifier.forward(z)
}

pub fn regress(params: &ModelParams, z_row: &[f64], g: usize) -> Result<f64> {
    let expert = params.experts.get(g).ok_or(Error::InvalidGroup {
        group: g,
        num_groups: params.num_groups(),
    })?;
    if z_row.len() != expert.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "expert expects {} inputs, got {}",
            expert.input_dim(),
            z_row.len()
        )));
    }
    Ok(expert.bias[0] + dot(expert.weights.row(0), z_row))
}

/// Gradient of the loss w.r.t. one expert output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertGrad {
    pub row: usize,
    pub group: usize,
    pub grad: f64,
}

/// Loss gradients flowing into the model outputs.
#[derive(Clone, Debug, Default)]
pub struct Upstream<'a> {
    pub z: Option<&'a Matrix>,
    pub logits: Option<&'a Matrix>,
    pub experts: &'a [ExpertGrad],
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: ModelParams,
    pub input: Matrix,
}

pub fn backward(params: &ModelParams, cache: &ForwardCache, upstream: &Upstream<'_>) -> Result<Gradients> {
    let b = cache.batch_size();
    let embed = params.embed_dim();
    if cache.inputs.len() != params.encoder.len() || cache.z.cols() != embed {
        return Err(Error::ShapeMismatch("cache does not match the model".into()));
    }
    let mut grads = params.zeros_like();
    let mut dz = match upstream.z {
        Some(m) if m.rows() != b || m.cols() != embed => {
            return Err(Error::ShapeMismatch(format!(
                "embedding gradient is {}x{}, expected {b}x{embed}",
                m.rows(),
                m.cols()
            )))
        }
        Some(m) => m.clone(),
        None => Matrix::zeros(b, embed),
    };

    if let Some(dl) = upstream.logits {
        if dl.rows() != b || dl.cols() != params.classifier.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "logit gradient is {}x{}, expected {b}x{}",
                dl.rows(),
                dl.cols(),
                params.classifier.output_dim()
            )));
        }
        let d = params.classifier.backward(&cache.z, dl, &mut grads.classifier);
        add_into(&mut dz, &d);
    }

    for eg in upstream.experts {
        if eg.row >= b {
            return Err(Error::ShapeMismatch(format!("expert gradient for row {} of {b}", eg.row)));
        }
        let expert = params.experts.get(eg.group).ok_or(Error::InvalidGroup {
            group: eg.group,
            num_groups: params.num_groups(),
        })?;
        let ge = &mut grads.experts[eg.group];
        ge.bias[0] += eg.grad;
        for (g, &zv) in ge.weights.row_mut(0).iter_mut().zip(cache.z.row(eg.row)) {
            *g += eg.grad * zv;
        }
        for (d, &w) in dz.row_mut(eg.row).iter_mut().zip(expert.weights.row(0)) {
            *d += eg.grad * w;
        }
    }

    let last = params.encoder.len() - 1;
    let mut delta = dz;
    for l in (0..params.encoder.len()).rev() {
        if l < last {
            for (d, &a) in delta.as_mut_slice().iter_mut().zip(cache.pre[l].as_slice()) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        delta = params.encoder[l].backward(&cache.inputs[l], &delta, &mut grads.encoder[l]);
    }

    Ok(Gradients {
        params: grads,
        input: delta,
    })
}

fn add_into(acc: &mut Matrix, other: &Matrix) {
    for (a, b) in acc.as_mut_slice().iter_mut().zip(other.as_slice()) {
        *a += b;
    }
}
