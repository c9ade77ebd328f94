use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::maximise::{AdapterGraph, ModalityAdapter};
use crate::nn::{Model, INPUT};
use crate::rng;
use crate::tensor::Tensor;

/// Image inputs: the perturbation is an offset in an autoencoder's latent
/// space. The perturbed sample is decode(encode(s) + s*) and the distance
/// is the squared pixel error between the decoded image and the
/// unperturbed reconstruction decode(encode(s)), so a zero offset costs
/// exactly zero (the fixed reconstruction error is not the search's fault).
///
/// The probe can sit in two places. With `probe_on_latent` the probed
/// model is the autoencoder itself and the probe reads the perturbed
/// latent directly; otherwise the probe reads a tap of a separate model
/// (e.g. a classifier) evaluated on the decoded image.
pub struct ImageAdapter {
    pub encoder: Model,
    pub decoder: Model,
    pub latent_dim: usize,
    pub probe_on_latent: bool,
}

pub const LATENT_OFFSET: &str = "latent_offset";

impl ImageAdapter {
    /// Split a trained autoencoder at its latent tap. The probe trained on
    /// that tap then reads the perturbed latent directly.
    pub fn from_autoencoder(autoencoder: &Model, tap: &str, latent_dim: usize) -> Result<Self> {
        let (encoder, decoder) = autoencoder.split_at_tap(tap)?;
        Ok(ImageAdapter {
            encoder,
            decoder,
            latent_dim,
            probe_on_latent: true,
        })
    }

    /// Same embedding, but the probe reads an intermediate layer of the
    /// model handed to `build`, evaluated on the decoded image.
    pub fn through_model(autoencoder: &Model, tap: &str, latent_dim: usize) -> Result<Self> {
        let (encoder, decoder) = autoencoder.split_at_tap(tap)?;
        Ok(ImageAdapter {
            encoder,
            decoder,
            latent_dim,
            probe_on_latent: false,
        })
    }
}

impl ModalityAdapter for ImageAdapter {
    fn pert_specs(&self) -> Vec<(String, Vec<usize>)> {
        vec![(LATENT_OFFSET.into(), vec![self.latent_dim])]
    }

    fn zero_effect(&self) -> Vec<Tensor> {
        vec![Tensor::zeros(&[self.latent_dim])]
    }

    fn init(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = rng::derive(seed, 3);
        vec![rng::uniform_tensor(
            &[self.latent_dim],
            -1e-3,
            1e-3,
            &mut rng,
        )]
    }

    fn build(
        &self,
        g: &mut Graph,
        model: &Model,
        tap: &str,
        sample: &Tensor,
        perts: &[NodeId],
    ) -> Result<AdapterGraph> {
        let batch = Tensor::stack(std::slice::from_ref(sample))?;
        let z0 = self.encoder.forward_batch(&batch)?;
        if z0.shape != [1, self.latent_dim] {
            return Err(Error::ShapeMismatch {
                op: "encoded latent".into(),
                lhs: z0.shape,
                rhs: vec![1, self.latent_dim],
            });
        }
        let recon0 = self.decoder.forward_batch(&z0)?;
        let z0 = g.constant(z0);
        let offset = g.reshape(perts[0], vec![1, self.latent_dim]);
        let z = g.add(z0, offset);
        let mut input_map = BTreeMap::new();
        input_map.insert(INPUT.to_string(), z);
        let map = self
            .decoder
            .graph
            .inline_into(g, &input_map, &self.decoder.params, "decoder/")?;
        let combined = map[self.decoder.graph.node(crate::nn::OUTPUT)?];
        let tap_value = if self.probe_on_latent {
            // The probed model is the autoencoder; its latent tap is
            // exactly the perturbed embedding.
            model.graph.node(tap)?;
            z
        } else {
            let mut model_inputs = BTreeMap::new();
            model_inputs.insert(INPUT.to_string(), combined);
            let model_map = model
                .graph
                .inline_into(g, &model_inputs, &model.params, "model/")?;
            model_map[model.graph.node(tap)?]
        };
        let anchor = g.constant(recon0);
        let diff = g.sub(combined, anchor);
        let distance = g.l2_norm_sq(diff);
        Ok(AdapterGraph {
            combined,
            tap_value,
            distance,
        })
    }
}

/// Value-level combine: decode(encode(s) + s*).
pub fn image_combine(
    sample: &Tensor,
    offset: &Tensor,
    encoder: &Model,
    decoder: &Model,
) -> Result<Tensor> {
    let z0 = encoder.forward_one(sample)?;
    if z0.shape != offset.shape {
        return Err(Error::ShapeMismatch {
            op: "image combine".into(),
            lhs: z0.shape,
            rhs: offset.shape.clone(),
        });
    }
    let z = Tensor::from_vec(
        z0.shape.clone(),
        z0.data.iter().zip(&offset.data).map(|(a, b)| a + b).collect(),
    )?;
    decoder.forward_one(&z)
}

/// Value-level distance: squared pixel error between the perturbed and the
/// unperturbed reconstruction.
pub fn image_distance(
    sample: &Tensor,
    offset: &Tensor,
    encoder: &Model,
    decoder: &Model,
) -> Result<f64> {
    let decoded = image_combine(sample, offset, encoder, decoder)?;
    let zero = Tensor::zeros(&offset.shape);
    let recon0 = image_combine(sample, &zero, encoder, decoder)?;
    if decoded.shape != sample.shape {
        return Err(Error::ShapeMismatch {
            op: "image distance".into(),
            lhs: decoded.shape,
            rhs: sample.shape.clone(),
        });
    }
    Ok(decoded
        .data
        .iter()
        .zip(&recon0.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}
