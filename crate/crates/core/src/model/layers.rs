//! Feature-extractor layers with hand-written backward passes.
//!
//! Layers are pure: `forward` returns the output plus a cache, `backward`
//! consumes the cache and returns the input gradient and the parameter
//! gradients (in `params()` order). Batch-norm running statistics are the
//! only state that training mutates outside the optimiser.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Shape;
use crate::error::{Error, Result};

/// A batch of activations, `n` samples of `shape`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn new(n: usize, shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * shape.size() {
            return Err(Error::ShapeMismatch(format!(
                "batch of {n} x {:?} needs {} values, got {}",
                shape,
                n * shape.size(),
                data.len()
            )));
        }
        Ok(Batch { n, shape, data })
    }

    pub fn zeros(n: usize, shape: Shape) -> Self {
        Batch {
            n,
            shape,
            data: vec![0.0; n * shape.size()],
        }
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.shape.size();
        &self.data[i * d..(i + 1) * d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `inputs x outputs`, row-major: `y_j = sum_i x_i w[i][j] + b_j`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][3][3]`; zero padding 1, stride 1.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv(Conv3x3),
    MaxPool2,
    Flatten,
    Relu,
    BatchNorm(BatchNorm),
}

#[derive(Debug, Clone)]
pub enum Cache {
    Input(Batch),
    Pool { input_shape: Shape, argmax: Vec<usize> },
    Flatten(Shape),
    Relu(Vec<bool>),
    Norm(NormCache),
}

#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    /// Samples per channel that fed the statistics.
    pub count: usize,
    train: bool,
}

fn he_normal<R: Rng>(rng: &mut R, fan_in: usize, len: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

impl Dense {
    pub fn init<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: he_normal(rng, inputs, inputs * outputs),
            bias: vec![0.0; outputs],
        }
    }
}

impl Conv3x3 {
    pub fn init<R: Rng>(rng: &mut R, in_channels: usize, out_channels: usize) -> Self {
        Conv3x3 {
            in_channels,
            out_channels,
            weight: he_normal(rng, in_channels * 9, out_channels * in_channels * 9),
            bias: vec![0.0; out_channels],
        }
    }
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    /// Folds one training batch's statistics into the running averages.
    pub fn update_running(&mut self, cache: &NormCache) {
        let unbias = if cache.count > 1 {
            cache.count as f64 / (cache.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.channels {
            self.running_mean[c] =
                (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * cache.batch_mean[c];
            self.running_var[c] =
                (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * cache.batch_var[c] * unbias;
        }
    }
}

/// Channel count and per-channel spatial size for batch norm.
fn norm_layout(shape: Shape) -> (usize, usize) {
    match shape {
        Shape::Flat(d) => (d, 1),
        Shape::Image(c, h, w) => (c, h * w),
    }
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv(_) => "conv3x3",
            Layer::MaxPool2 => "maxpool2",
            Layer::Flatten => "flatten",
            Layer::Relu => "relu",
            Layer::BatchNorm(_) => "batchnorm",
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match (self, input) {
            (Layer::Dense(d), Shape::Flat(k)) if k == d.inputs => Ok(Shape::Flat(d.outputs)),
            (Layer::Conv(c), Shape::Image(ch, h, w)) if ch == c.in_channels => {
                Ok(Shape::Image(c.out_channels, h, w))
            }
            (Layer::MaxPool2, Shape::Image(c, h, w)) if h >= 2 && w >= 2 => Ok(Shape::Image(c, h / 2, w / 2)),
            (Layer::Flatten, s) => Ok(Shape::Flat(s.size())),
            (Layer::Relu, s) => Ok(s),
            (Layer::BatchNorm(b), s) if norm_layout(s).0 == b.channels => Ok(s),
            (layer, s) => Err(Error::ShapeMismatch(format!(
                "{} layer cannot take input of shape {:?}",
                layer.kind(),
                s
            ))),
        }
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            _ => Vec::new(),
        }
    }

    pub fn forward(&self, x: &Batch, train: bool) -> Result<(Batch, Cache)> {
        let out_shape = self.output_shape(x.shape)?;
        let n = x.n;
        match self {
            Layer::Dense(d) => {
                let mut out = Vec::with_capacity(n * d.outputs);
                for s in 0..n {
                    let xi = x.sample(s);
                    let mut y = d.bias.clone();
                    for (i, &v) in xi.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let row = &d.weight[i * d.outputs..(i + 1) * d.outputs];
                        for (yj, wij) in y.iter_mut().zip(row) {
                            *yj += v * wij;
                        }
                    }
                    out.extend_from_slice(&y);
                }
                Ok((Batch::new(n, out_shape, out)?, Cache::Input(x.clone())))
            }
            Layer::Conv(c) => {
                let Shape::Image(cin, h, w) = x.shape else { unreachable!() };
                let cout = c.out_channels;
                let mut out = vec![0.0; n * cout * h * w];
                for s in 0..n {
                    let xi = x.sample(s);
                    let yo = &mut out[s * cout * h * w..(s + 1) * cout * h * w];
                    for o in 0..cout {
                        let plane = &mut yo[o * h * w..(o + 1) * h * w];
                        plane.iter_mut().for_each(|v| *v = c.bias[o]);
                        for i in 0..cin {
                            let src = &xi[i * h * w..(i + 1) * h * w];
                            let k = &c.weight[(o * cin + i) * 9..(o * cin + i) * 9 + 9];
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let wv = k[ky * 3 + kx];
                                    // output (r, q) reads input (r + ky - 1, q + kx - 1)
                                    let r0 = if ky == 0 { 1 } else { 0 };
                                    let r1 = if ky == 2 { h - 1 } else { h };
                                    let q0 = if kx == 0 { 1 } else { 0 };
                                    let q1 = if kx == 2 { w - 1 } else { w };
                                    for r in r0..r1 {
                                        let srow = &src[(r + ky - 1) * w..(r + ky) * w];
                                        let drow = &mut plane[r * w..(r + 1) * w];
                                        for q in q0..q1 {
                                            drow[q] += wv * srow[q + kx - 1];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Ok((Batch::new(n, out_shape, out)?, Cache::Input(x.clone())))
            }
            Layer::MaxPool2 => {
                let Shape::Image(ch, h, w) = x.shape else { unreachable!() };
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Vec::with_capacity(n * ch * oh * ow);
                let mut argmax = Vec::with_capacity(n * ch * oh * ow);
                for s in 0..n {
                    let xi = x.sample(s);
                    for c in 0..ch {
                        for r in 0..oh {
                            for q in 0..ow {
                                let mut best = c * h * w + 2 * r * w + 2 * q;
                                for (dr, dq) in [(0, 1), (1, 0), (1, 1)] {
                                    let idx = c * h * w + (2 * r + dr) * w + 2 * q + dq;
                                    if xi[idx] > xi[best] {
                                        best = idx;
                                    }
                                }
                                out.push(xi[best]);
                                argmax.push(best);
                            }
                        }
                    }
                }
                Ok((
                    Batch::new(n, out_shape, out)?,
                    Cache::Pool {
                        input_shape: x.shape,
                        argmax,
                    },
                ))
            }
            Layer::Flatten => Ok((
                Batch::new(n, out_shape, x.data.clone())?,
                Cache::Flatten(x.shape),
            )),
            Layer::Relu => {
                let mask: Vec<bool> = x.data.iter().map(|&v| v > 0.0).collect();
                let out = x.data.iter().map(|&v| v.max(0.0)).collect();
                Ok((Batch::new(n, out_shape, out)?, Cache::Relu(mask)))
            }
            Layer::BatchNorm(b) => {
                let (channels, spatial) = norm_layout(x.shape);
                let per = channels * spatial;
                let count = n * spatial;
                let (mean, var) = if train {
                    if n == 0 {
                        return Err(Error::EmptyInput("batch norm on an empty batch".into()));
                    }
                    let mut mean = vec![0.0; channels];
                    let mut var = vec![0.0; channels];
                    for s in 0..n {
                        for c in 0..channels {
                            let seg = &x.data[s * per + c * spatial..s * per + (c + 1) * spatial];
                            mean[c] += seg.iter().sum::<f64>();
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= count as f64);
                    for s in 0..n {
                        for c in 0..channels {
                            let seg = &x.data[s * per + c * spatial..s * per + (c + 1) * spatial];
                            var[c] += seg.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= count as f64);
                    (mean, var)
                } else {
                    (b.running_mean.clone(), b.running_var.clone())
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut xhat = vec![0.0; x.data.len()];
                let mut out = vec![0.0; x.data.len()];
                for s in 0..n {
                    for c in 0..channels {
                        for k in 0..spatial {
                            let idx = s * per + c * spatial + k;
                            xhat[idx] = (x.data[idx] - mean[c]) * inv_std[c];
                            out[idx] = b.gamma[c] * xhat[idx] + b.beta[c];
                        }
                    }
                }
                Ok((
                    Batch::new(n, out_shape, out)?,
                    Cache::Norm(NormCache {
                        xhat,
                        inv_std,
                        batch_mean: mean,
                        batch_var: var,
                        count,
                        train,
                    }),
                ))
            }
        }
    }

    /// Returns the gradient with respect to the layer input and the
    /// parameter gradients, summed over the batch.
    pub fn backward(&self, cache: &Cache, grad: &Batch) -> (Batch, Vec<Vec<f64>>) {
        let n = grad.n;
        match (self, cache) {
            (Layer::Dense(d), Cache::Input(x)) => {
                let mut gx = vec![0.0; n * d.inputs];
                let mut gw = vec![0.0; d.weight.len()];
                let mut gb = vec![0.0; d.outputs];
                for s in 0..n {
                    let g = grad.sample(s);
                    let xi = x.sample(s);
                    for (gbj, gj) in gb.iter_mut().zip(g) {
                        *gbj += gj;
                    }
                    for i in 0..d.inputs {
                        let row = &d.weight[i * d.outputs..(i + 1) * d.outputs];
                        gx[s * d.inputs + i] = row.iter().zip(g).map(|(w, g)| w * g).sum();
                        let xv = xi[i];
                        if xv != 0.0 {
                            let grow = &mut gw[i * d.outputs..(i + 1) * d.outputs];
                            for (gwij, gj) in grow.iter_mut().zip(g) {
                                *gwij += xv * gj;
                            }
                        }
                    }
                }
                (Batch { n, shape: x.shape, data: gx }, vec![gw, gb])
            }
            (Layer::Conv(c), Cache::Input(x)) => {
                let Shape::Image(cin, h, w) = x.shape else { unreachable!() };
                let cout = c.out_channels;
                let mut gx = vec![0.0; n * cin * h * w];
                let mut gw = vec![0.0; c.weight.len()];
                let mut gb = vec![0.0; cout];
                for s in 0..n {
                    let xi = x.sample(s);
                    let gi = grad.sample(s);
                    let gxi = &mut gx[s * cin * h * w..(s + 1) * cin * h * w];
                    for o in 0..cout {
                        let gplane = &gi[o * h * w..(o + 1) * h * w];
                        gb[o] += gplane.iter().sum::<f64>();
                        for i in 0..cin {
                            let src = &xi[i * h * w..(i + 1) * h * w];
                            let base = (o * cin + i) * 9;
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let wv = c.weight[base + ky * 3 + kx];
                                    let r0 = if ky == 0 { 1 } else { 0 };
                                    let r1 = if ky == 2 { h - 1 } else { h };
                                    let q0 = if kx == 0 { 1 } else { 0 };
                                    let q1 = if kx == 2 { w - 1 } else { w };
                                    let mut acc = 0.0;
                                    for r in r0..r1 {
                                        let srow = (r + ky - 1) * w;
                                        for q in q0..q1 {
                                            let g = gplane[r * w + q];
                                            acc += g * src[srow + q + kx - 1];
                                            gxi[i * h * w + srow + q + kx - 1] += wv * g;
                                        }
                                    }
                                    gw[base + ky * 3 + kx] += acc;
                                }
                            }
                        }
                    }
                }
                (Batch { n, shape: x.shape, data: gx }, vec![gw, gb])
            }
            (Layer::MaxPool2, Cache::Pool { input_shape, argmax }) => {
                let per_in = input_shape.size();
                let per_out = grad.shape.size();
                let mut gx = vec![0.0; n * per_in];
                for s in 0..n {
                    for k in 0..per_out {
                        gx[s * per_in + argmax[s * per_out + k]] += grad.data[s * per_out + k];
                    }
                }
                (Batch { n, shape: *input_shape, data: gx }, Vec::new())
            }
            (Layer::Flatten, Cache::Flatten(shape)) => (
                Batch {
                    n,
                    shape: *shape,
                    data: grad.data.clone(),
                },
                Vec::new(),
            ),
            (Layer::Relu, Cache::Relu(mask)) => {
                let data = grad
                    .data
                    .iter()
                    .zip(mask)
                    .map(|(&g, &m)| if m { g } else { 0.0 })
                    .collect();
                (Batch { n, shape: grad.shape, data }, Vec::new())
            }
            (Layer::BatchNorm(b), Cache::Norm(nc)) => {
                let (channels, spatial) = norm_layout(grad.shape);
                let per = channels * spatial;
                let mut ggamma = vec![0.0; channels];
                let mut gbeta = vec![0.0; channels];
                for s in 0..n {
                    for c in 0..channels {
                        for k in 0..spatial {
                            let idx = s * per + c * spatial + k;
                            ggamma[c] += grad.data[idx] * nc.xhat[idx];
                            gbeta[c] += grad.data[idx];
                        }
                    }
                }
                let mut gx = vec![0.0; grad.data.len()];
                let m = nc.count as f64;
                for s in 0..n {
                    for c in 0..channels {
                        let scale = b.gamma[c] * nc.inv_std[c];
                        for k in 0..spatial {
                            let idx = s * per + c * spatial + k;
                            gx[idx] = if nc.train {
                                // d/dx of gamma * (x - mean) / sqrt(var + eps) with batch statistics
                                scale * (grad.data[idx] - gbeta[c] / m - nc.xhat[idx] * ggamma[c] / m)
                            } else {
                                scale * grad.data[idx]
                            };
                        }
                    }
                }
                (Batch { n, shape: grad.shape, data: gx }, vec![ggamma, gbeta])
            }
            (layer, _) => panic!("cache does not belong to a {} layer", layer.kind()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar probe loss `sum_k r_k y_k` with fixed random weights `r`.
    fn probe(layer: &Layer, x: &Batch, r: &[f64], train: bool) -> f64 {
        let (y, _) = layer.forward(x, train).unwrap();
        y.data.iter().zip(r).map(|(a, b)| a * b).sum()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
    }

    /// Central differences on the input and on every parameter.
    fn check_layer(mut layer: Layer, x: Batch, train: bool, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (y, cache) = layer.forward(&x, train).unwrap();
        let r: Vec<f64> = (0..y.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = Batch { n: y.n, shape: y.shape, data: r.clone() };
        let (gx, gp) = layer.backward(&cache, &g);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for k in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[k] += h;
            let mut xm = x.clone();
            xm.data[k] -= h;
            let fd = (probe(&layer, &xp, &r, train) - probe(&layer, &xm, &r, train)) / (2.0 * h);
            worst = worst.max(rel_err(fd, gx.data[k]));
        }
        for p in 0..gp.len() {
            for k in 0..gp[p].len() {
                let orig = layer.params()[p][k];
                layer.params_mut()[p][k] = orig + h;
                let fp = probe(&layer, &x, &r, train);
                layer.params_mut()[p][k] = orig - h;
                let fm = probe(&layer, &x, &r, train);
                layer.params_mut()[p][k] = orig;
                worst = worst.max(rel_err((fp - fm) / (2.0 * h), gp[p][k]));
            }
        }
        assert!(worst < 1e-4, "{} gradient rel err {worst:e}", layer.kind());
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, shape: Shape) -> Batch {
        let data = (0..n * shape.size()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Batch::new(n, shape, data).unwrap()
    }

    #[test]
    fn dense_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = Layer::Dense(Dense::init(&mut rng, 5, 3));
        let x = random_batch(&mut rng, 4, Shape::Flat(5));
        check_layer(layer, x, true, 2);
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv3x3::init(&mut rng, 2, 3);
        conv.bias = vec![0.1, -0.2, 0.3];
        let x = random_batch(&mut rng, 2, Shape::Image(2, 4, 5));
        check_layer(Layer::Conv(conv), x, true, 4);
    }

    #[test]
    fn maxpool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Distinct values keep the argmax away from ties.
        let x = random_batch(&mut rng, 2, Shape::Image(2, 4, 6));
        check_layer(Layer::MaxPool2, x, true, 6);
    }

    #[test]
    fn relu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut x = random_batch(&mut rng, 3, Shape::Flat(6));
        // Keep inputs away from the kink.
        x.data.iter_mut().for_each(|v| {
            if v.abs() < 0.05 {
                *v += 0.1
            }
        });
        check_layer(Layer::Relu, x, true, 8);
    }

    #[test]
    fn batchnorm_gradients_train_and_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bn = BatchNorm::new(3);
        bn.gamma = vec![1.3, 0.7, -0.4];
        bn.beta = vec![0.1, 0.0, 0.5];
        bn.running_mean = vec![0.2, -0.1, 0.0];
        bn.running_var = vec![0.5, 1.5, 2.0];
        let x = random_batch(&mut rng, 5, Shape::Flat(3));
        check_layer(Layer::BatchNorm(bn.clone()), x.clone(), true, 10);
        check_layer(Layer::BatchNorm(bn.clone()), x, false, 11);
        let xi = random_batch(&mut rng, 3, Shape::Image(3, 2, 2));
        check_layer(Layer::BatchNorm(bn), xi, true, 12);
    }

    #[test]
    fn batchnorm_eval_is_affine_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut bn = BatchNorm::new(2);
        bn.running_mean = vec![1.0, -1.0];
        bn.running_var = vec![4.0, 0.25];
        let layer = Layer::BatchNorm(bn);
        let x = random_batch(&mut rng, 4, Shape::Flat(2));
        let (a, _) = layer.forward(&x, false).unwrap();
        // Evaluating a single sample alone gives the same output.
        let single = Batch::new(1, Shape::Flat(2), x.sample(2).to_vec()).unwrap();
        let (b, _) = layer.forward(&single, false).unwrap();
        assert_eq!(a.sample(2), b.sample(0));
        let expect = (x.sample(0)[0] - 1.0) / (4.0f64 + BN_EPS).sqrt();
        assert!((a.sample(0)[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut conv = Conv3x3 {
            in_channels: 1,
            out_channels: 1,
            weight: vec![0.0; 9],
            bias: vec![0.0],
        };
        conv.weight[4] = 1.0;
        let x = Batch::new(1, Shape::Image(1, 2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (y, _) = Layer::Conv(conv).forward(&x, false).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = Layer::Dense(Dense::init(&mut rng, 3, 2));
        let x = Batch::zeros(1, Shape::Flat(4));
        assert!(matches!(layer.forward(&x, false), Err(Error::ShapeMismatch(_))));
        assert!(Layer::MaxPool2.forward(&x, false).is_err());
    }
}
