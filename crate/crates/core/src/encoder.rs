//! MLP backbone plus two-layer projection head with L2-normalized output,
//! and its exact backward pass.
//!
//! Layers are dense `x·W + b` with ReLU after every layer except the last
//! head layer. Weights are stored `in × out`.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bank::truncated;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderDims {
    pub input: usize,
    pub backbone: Vec<usize>,
    pub head_hidden: usize,
    pub embed: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            input: 16,
            backbone: vec![128, 128],
            head_hidden: 64,
            embed: 32,
        }
    }
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        if self.backbone.is_empty() {
            return Err(Error::config("encoder backbone needs at least one layer"));
        }
        if self.embed < 2 {
            return Err(Error::config("embedding dimension must be at least 2"));
        }
        if self.chain().contains(&0) {
            return Err(Error::config("encoder layer widths must be positive"));
        }
        Ok(())
    }

    /// Widths from input to embedding.
    pub fn chain(&self) -> Vec<usize> {
        let mut c = vec![self.input];
        c.extend(&self.backbone);
        c.push(self.head_hidden);
        c.push(self.embed);
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Encoder weights. Also used to hold gradients and optimizer buffers, which
/// share the same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    layers: Vec<Dense<T>>,
    backbone_depth: usize,
}

impl<T: Scalar> EncoderParams<T> {
    /// He-normal weights (variance `2 / fan_in`), zero biases.
    pub fn init(dims: &EncoderDims, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let chain = dims.chain();
        let layers = chain
            .windows(2)
            .map(|w| {
                let std = (2.0 / w[0] as f64).sqrt();
                Dense {
                    weight: Array2::from_shape_simple_fn((w[0], w[1]), || {
                        T::of(std * rng.sample::<f64, _>(StandardNormal))
                    }),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self {
            layers,
            backbone_depth: dims.backbone.len(),
        })
    }

    /// Builds parameters from explicit layers; the last two form the head.
    pub fn from_layers(layers: Vec<Dense<T>>) -> Result<Self> {
        if layers.len() < 3 {
            return Err(Error::config("encoder needs a backbone layer and a two-layer head"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::shape(format!("layer {i} bias length {} != {}", l.bias.len(), l.output_dim())));
            }
            if i > 0 && layers[i - 1].output_dim() != l.input_dim() {
                return Err(Error::config(format!("layer {i} input {} does not chain", l.input_dim())));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|x| !x.is_finite()) {
                return Err(Error::numeric(format!("layer {i} has non-finite parameters")));
            }
        }
        if layers.last().expect("nonempty").output_dim() < 2 {
            return Err(Error::config("embedding dimension must be at least 2"));
        }
        let backbone_depth = layers.len() - 2;
        Ok(Self { layers, backbone_depth })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Dense::zeros(l.input_dim(), l.output_dim())).collect(),
            backbone_depth: self.backbone_depth,
        }
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    pub fn backbone(&self) -> &[Dense<T>] {
        &self.layers[..self.backbone_depth]
    }

    pub fn head(&self) -> &[Dense<T>] {
        &self.layers[self.backbone_depth..]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            input: self.input_dim(),
            backbone: self.backbone().iter().map(Dense::output_dim).collect(),
            head_hidden: self.head()[0].output_dim(),
            embed: self.embed_dim(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Every weight matrix and bias vector as a flat slice, layer by layer.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: l.weight.mapv(|x| U::of(x.as_f64())),
                    bias: l.bias.mapv(|x| U::of(x.as_f64())),
                })
                .collect(),
            backbone_depth: self.backbone_depth,
        }
    }

    /// Checkpoint segment: layer count, backbone depth, per-layer dims, then
    /// each layer's weights and bias as little-endian `f32`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_u32::<LittleEndian>(self.layers.len() as u32)?;
        w.write_u32::<LittleEndian>(self.backbone_depth as u32)?;
        for l in &self.layers {
            w.write_u32::<LittleEndian>(l.input_dim() as u32)?;
            w.write_u32::<LittleEndian>(l.output_dim() as u32)?;
        }
        for t in self.tensors() {
            for &x in t {
                w.write_f32::<LittleEndian>(x.as_f64() as f32)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let count = r.read_u32::<LittleEndian>().map_err(truncated("layer count"))? as usize;
        let depth = r.read_u32::<LittleEndian>().map_err(truncated("backbone depth"))? as usize;
        if !(3..=64).contains(&count) || depth + 2 != count {
            return Err(Error::format(format!("implausible encoder layout: {count} layers, depth {depth}")));
        }
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let i = r.read_u32::<LittleEndian>().map_err(truncated("layer dims"))? as usize;
            let o = r.read_u32::<LittleEndian>().map_err(truncated("layer dims"))? as usize;
            if i == 0 || o == 0 || i > 1 << 20 || o > 1 << 20 {
                return Err(Error::format(format!("implausible layer shape {i}x{o}")));
            }
            shapes.push((i, o));
        }
        let mut layers = Vec::with_capacity(count);
        for (i, o) in shapes {
            let mut w = vec![0f32; i * o];
            r.read_f32_into::<LittleEndian>(&mut w).map_err(truncated("layer weights"))?;
            let mut b = vec![0f32; o];
            r.read_f32_into::<LittleEndian>(&mut b).map_err(truncated("layer bias"))?;
            layers.push(Dense {
                weight: Array2::from_shape_vec((i, o), w).expect("length matches").mapv(|x| T::of(x as f64)),
                bias: Array1::from_vec(b).mapv(|x| T::of(x as f64)),
            });
        }
        Self::from_layers(layers).map_err(|e| Error::format(format!("encoder segment: {e}")))
    }
}

/// Intermediates kept by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input to each layer.
    pub inputs: Vec<Array2<T>>,
    /// Pre-activation output of each layer; the last one is `z`.
    pub pre: Vec<Array2<T>>,
    /// `‖z‖` per row.
    pub norms: Array1<T>,
    /// `z / ‖z‖`.
    pub embeddings: Array2<T>,
}

/// Row-wise `normalize(head(backbone(batch)))`.
pub fn forward<T: Scalar>(params: &EncoderParams<T>, batch: ArrayView2<T>) -> Result<(Array2<T>, ForwardCache<T>)> {
    if batch.ncols() != params.input_dim() {
        return Err(Error::shape(format!(
            "batch has {} features, encoder expects {}",
            batch.ncols(),
            params.input_dim()
        )));
    }
    if batch.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("non-finite encoder input"));
    }
    let last = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut x = batch.to_owned();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = x.dot(&layer.weight) + &layer.bias;
        inputs.push(x);
        x = if i < last { z.mapv(|v| v.max(T::zero())) } else { z.clone() };
        pre.push(z);
    }
    let z = pre.last().expect("at least one layer");
    let norms: Array1<T> = z.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(row) = norms.iter().position(|n| !(*n > T::min_positive_value()) || !n.is_finite()) {
        return Err(Error::degenerate(format!("embedding of batch row {row} has norm {}", norms[row])));
    }
    let embeddings = z / &norms.view().insert_axis(Axis(1));
    Ok((
        embeddings.clone(),
        ForwardCache {
            inputs,
            pre,
            norms,
            embeddings,
        },
    ))
}

/// Embeds a batch without keeping intermediates.
pub fn embed<T: Scalar>(params: &EncoderParams<T>, batch: ArrayView2<T>) -> Result<Array2<T>> {
    forward(params, batch).map(|(e, _)| e)
}

/// Gradient of the L2 normalization: `(I − v vᵀ) u / ‖z‖` per row.
pub fn normalization_backward<T: Scalar>(
    embeddings: ArrayView2<T>,
    norms: &Array1<T>,
    grad_embeddings: ArrayView2<T>,
) -> Array2<T> {
    let mut gz = grad_embeddings.to_owned();
    Zip::from(gz.rows_mut())
        .and(embeddings.rows())
        .and(norms)
        .for_each(|mut g, v, &n| {
            let along = v.dot(&g);
            g.scaled_add(-along, &v);
            g.mapv_inplace(|x| x / n);
        });
    gz
}

/// Parameter gradients for upstream gradients on the normalized embeddings.
pub fn backward<T: Scalar>(
    params: &EncoderParams<T>,
    cache: &ForwardCache<T>,
    grad_embeddings: ArrayView2<T>,
) -> Result<EncoderParams<T>> {
    if grad_embeddings.dim() != cache.embeddings.dim() || cache.pre.len() != params.layers.len() {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match cached embeddings {:?}",
            grad_embeddings.dim(),
            cache.embeddings.dim()
        )));
    }
    let mut grads = params.zeros_like();
    let mut g = normalization_backward(cache.embeddings.view(), &cache.norms, grad_embeddings);
    for l in (0..params.layers.len()).rev() {
        let gl = &mut grads.layers[l];
        gl.weight = cache.inputs[l].t().dot(&g);
        gl.bias = g.sum_axis(Axis(0));
        if l > 0 {
            let mut below = g.dot(&params.layers[l].weight.t());
            Zip::from(&mut below)
                .and(&cache.pre[l - 1])
                .for_each(|b, &p| {
                    if p <= T::zero() {
                        *b = T::zero();
                    }
                });
            g = below;
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;

    fn small_dims() -> EncoderDims {
        EncoderDims {
            input: 4,
            backbone: vec![8],
            head_hidden: 8,
            embed: 4,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = EncoderParams::<f32>::init(&EncoderDims::default(), &mut seeded(3)).unwrap();
        let b = EncoderParams::<f32>::init(&EncoderDims::default(), &mut seeded(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&x| x == 0.0)));
        assert_eq!(a.dims(), EncoderDims::default());
        assert_eq!(a.backbone().len(), 2);
        assert_eq!(a.head().len(), 2);
    }

    #[test]
    fn init_variance_is_two_over_fan_in() {
        let dims = EncoderDims {
            input: 100,
            backbone: vec![100],
            head_hidden: 4,
            embed: 2,
        };
        let p = EncoderParams::<f64>::init(&dims, &mut seeded(5)).unwrap();
        let w = &p.layers()[0].weight;
        assert_eq!(w.len(), 10_000);
        let mean = w.mean().unwrap();
        let var = w.mapv(|x| (x - mean).powi(2)).mean().unwrap();
        assert!((var / 0.02 - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn invalid_dims_rejected() {
        let mut d = small_dims();
        d.embed = 1;
        assert!(EncoderParams::<f32>::init(&d, &mut seeded(0)).is_err());
        let mut d = small_dims();
        d.backbone = vec![];
        assert!(EncoderParams::<f32>::init(&d, &mut seeded(0)).is_err());
        let mut d = small_dims();
        d.head_hidden = 0;
        assert!(EncoderParams::<f32>::init(&d, &mut seeded(0)).is_err());
    }

    #[test]
    fn forward_rows_are_unit_and_deterministic() {
        let p = EncoderParams::<f32>::init(&small_dims(), &mut seeded(1)).unwrap();
        let x = Array2::from_shape_fn((6, 4), |(i, j)| (i as f32 - 2.5) * 0.3 + j as f32 * 0.1);
        let (e1, _) = forward(&p, x.view()).unwrap();
        let (e2, _) = forward(&p, x.view()).unwrap();
        assert_eq!(e1, e2);
        for r in e1.outer_iter() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-5);
        }
        assert!(matches!(forward(&p, Array2::zeros((2, 3)).view()), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_last_layer_is_degenerate() {
        let mut p = EncoderParams::<f32>::init(&small_dims(), &mut seeded(1)).unwrap();
        let last = p.layers_mut().last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        assert!(matches!(forward(&p, Array2::ones((2, 4)).view()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn normalization_is_scale_invariant_and_projects_out_radial_gradient() {
        let v = array![[0.6f64, 0.8]];
        let norms = array![5.0];
        let g = normalization_backward(v.view(), &norms, v.view());
        assert!(g.iter().all(|x| x.abs() < 1e-15));

        let p = EncoderParams::<f64>::from_layers(vec![
            Dense { weight: Array2::eye(3), bias: Array1::zeros(3) },
            Dense { weight: Array2::eye(3), bias: Array1::zeros(3) },
            Dense { weight: Array2::eye(3), bias: Array1::zeros(3) },
        ])
        .unwrap();
        let mut doubled = p.clone();
        doubled.layers_mut()[2].weight *= 2.0;
        let x = array![[3.0, 4.0, 12.0]];
        assert_eq!(embed(&p, x.view()).unwrap(), embed(&doubled, x.view()).unwrap());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = EncoderParams::<f64>::init(&small_dims(), &mut seeded(2)).unwrap();
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.1 - 0.5);
        let (e, cache) = forward(&p, x.view()).unwrap();
        let g = backward(&p, &cache, Array2::zeros(e.dim()).view()).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(backward(&p, &cache, Array2::zeros((2, 4)).view()).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = EncoderParams::<f64>::init(&small_dims(), &mut seeded(8)).unwrap();
        let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.4 - 0.8);
        let upstream = Array2::from_shape_fn((5, 4), |(i, j)| ((i + 2 * j) % 3) as f64 - 1.0);
        // Scalar objective: <upstream, embeddings>.
        let objective = |q: &EncoderParams<f64>| (embed(q, x.view()).unwrap() * &upstream).sum();
        let (_, cache) = forward(&p, x.view()).unwrap();
        let g = backward(&p, &cache, upstream.view()).unwrap();
        let h = 1e-5;
        let analytic = g.tensors();
        for (t, ga) in analytic.iter().enumerate() {
            for i in 0..ga.len() {
                let mut plus = p.clone();
                plus.tensors_mut()[t][i] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[t][i] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let scale = fd.abs().max(ga[i].abs()).max(1e-6);
                assert!((fd - ga[i]).abs() / scale <= 1e-5, "tensor {t}[{i}]: {fd} vs {}", ga[i]);
            }
        }
    }

    #[test]
    fn segment_round_trip() {
        let p = EncoderParams::<f32>::init(&small_dims(), &mut seeded(4)).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(EncoderParams::<f32>::read_from(&mut buf.as_slice()).unwrap(), p);
        assert!(matches!(
            EncoderParams::<f32>::read_from(&mut &buf[..buf.len() - 2]),
            Err(Error::Format(_))
        ));
    }
}
