//! The shared image sub-model: a frozen extractor producing a high-dimensional
//! raw feature, followed by a trainable three-layer compressor.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::params::{push_dense, splitmix64, DenseLayer, ParamGroup, ParamStore};
use crate::data::ImageFeatureStore;
use crate::error::{Error, Result};
use crate::numerics::{
    matvec_bias, matvec_t_acc, outer_acc, prelu_forward, Graph, Tensor, Var,
};

/// Stand-in for a pretrained convolutional trunk: a seeded random projection
/// of the image latent followed by `tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedExtractor {
    seed: u64,
    latent_dim: usize,
    raw_dim: usize,
    projection: Vec<f64>,
}

impl FixedExtractor {
    pub fn new(seed: u64, latent_dim: usize, raw_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
        let scale = 1.0 / (latent_dim as f64).sqrt();
        let projection = (0..raw_dim * latent_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self {
            seed,
            latent_dim,
            raw_dim,
            projection,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn raw_dim(&self) -> usize {
        self.raw_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Raw feature for a latent vector. `libm::tanh` keeps this bit-identical across platforms.
    pub fn from_latent(&self, latent: &[f32]) -> Result<Vec<f64>> {
        if latent.len() != self.latent_dim {
            return Err(Error::Dimension {
                op: "fixed_extract",
                left: vec![self.raw_dim, self.latent_dim],
                right: vec![latent.len()],
            });
        }
        let z: Vec<f64> = latent.iter().map(|&v| f64::from(v)).collect();
        let zero = vec![0.0; self.raw_dim];
        let mut out = vec![0.0; self.raw_dim];
        matvec_bias(
            &self.projection,
            self.raw_dim,
            self.latent_dim,
            &z,
            &zero,
            &mut out,
        );
        out.iter_mut().for_each(|v| *v = libm::tanh(*v));
        Ok(out)
    }

    pub fn extract(&self, store: &ImageFeatureStore, image: u32) -> Result<Vec<f64>> {
        self.from_latent(store.latent(image)?)
    }
}

/// Forward activations kept by the server for the backward pass.
#[derive(Clone, Debug)]
pub struct ImageActivations {
    input: Vec<f64>,
    pre: [Vec<f64>; 2],
    hidden: [Vec<f64>; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbeddingModel {
    pub params: ParamStore,
    layers: [DenseLayer; 3],
    widths: [usize; 4],
}

impl ImageEmbeddingModel {
    /// `widths = [raw, hidden1, hidden2, out]`.
    pub fn new(widths: [usize; 4], seed: u64) -> Self {
        let mut rng = ParamGroup::ImageModel.rng(seed);
        let mut params = ParamStore::new();
        let g = ParamGroup::ImageModel;
        let layers = [
            push_dense(&mut params, &mut rng, "image.fc1", g, widths[0], widths[1], true),
            push_dense(&mut params, &mut rng, "image.fc2", g, widths[1], widths[2], true),
            push_dense(&mut params, &mut rng, "image.fc3", g, widths[2], widths[3], false),
        ];
        Self {
            params,
            layers,
            widths,
        }
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    pub fn output_dim(&self) -> usize {
        self.widths[3]
    }

    /// Taped forward; `vars` are this model's bound parameters.
    pub fn forward_graph(&self, g: &mut Graph<'_>, vars: &[Var], raw: Var) -> Result<Var> {
        let mut h = raw;
        for layer in &self.layers {
            h = layer.apply(g, vars, h)?;
        }
        Ok(h)
    }

    /// Untaped forward that keeps activations for [`Self::backward_cached`].
    pub fn forward_cached(&self, raw: &[f64]) -> Result<(Vec<f64>, ImageActivations)> {
        if raw.len() != self.widths[0] {
            return Err(Error::Dimension {
                op: "image_embed",
                left: vec![self.widths[1], self.widths[0]],
                right: vec![raw.len()],
            });
        }
        let p = self.params.tensors();
        let mut input = raw.to_vec();
        let mut pre: [Vec<f64>; 2] = Default::default();
        let mut hidden: [Vec<f64>; 2] = Default::default();
        for k in 0..2 {
            let l = &self.layers[k];
            let mut z = vec![0.0; self.widths[k + 1]];
            let x = if k == 0 { &input } else { &hidden[k - 1] };
            matvec_bias(
                p[l.w].data(),
                self.widths[k + 1],
                self.widths[k],
                x,
                p[l.b].data(),
                &mut z,
            );
            hidden[k] = prelu_forward(&z, p[l.alpha.expect("activated")].data());
            pre[k] = z;
        }
        let l = &self.layers[2];
        let mut out = vec![0.0; self.widths[3]];
        matvec_bias(
            p[l.w].data(),
            self.widths[3],
            self.widths[2],
            &hidden[1],
            p[l.b].data(),
            &mut out,
        );
        input.shrink_to_fit();
        Ok((out, ImageActivations { input, pre, hidden }))
    }

    pub fn embed(&self, raw: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(raw)?.0)
    }

    /// Accumulates `∂(delta · E(x))/∂params` into `grads` (laid out like `self.params`).
    pub fn backward_cached(&self, acts: &ImageActivations, delta: &[f64], grads: &mut [Tensor]) {
        let p = self.params.tensors();
        let w = self.widths;
        let mut d = delta.to_vec();
        for k in (0..3).rev() {
            let l = &self.layers[k];
            if let Some(a) = l.alpha {
                let z = &acts.pre[k];
                let alpha = p[a].data();
                let ga = grads[a].data_mut();
                for i in 0..d.len() {
                    if z[i] > 0.0 {
                        continue;
                    }
                    if z[i] < 0.0 {
                        ga[i] += d[i] * z[i];
                    }
                    d[i] *= alpha[i];
                }
            }
            let x = if k == 0 {
                &acts.input
            } else {
                &acts.hidden[k - 1]
            };
            outer_acc(grads[l.w].data_mut(), w[k], &d, x);
            for (g, di) in grads[l.b].data_mut().iter_mut().zip(&d) {
                *g += di;
            }
            if k > 0 {
                let mut dx = vec![0.0; w[k]];
                matvec_t_acc(p[l.w].data(), w[k + 1], w[k], &d, &mut dx);
                d = dx;
            }
        }
    }
}
