//! The structured-prediction CNN:
//!
//! ```text
//! input (2h+1)²×C → conv16 → conv16 → maxpool → conv32 → conv32 → maxpool
//!                 → FC64 → FC64 → FC(s²) → sigmoid
//! ```
//!
//! All convolutions are 3×3, stride 1, zero padding 1, followed by ReLU.
//! Pooling is 2×2 with stride 2 and floor semantics (27 → 13 → 6). Dropout
//! follows the ReLU of the first two dense layers.

mod train;

use rand::Rng;
use rayon::prelude::*;

use crate::dataset::PatchGeometry;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, tag};
use crate::tensor::{
    conv2d_backward, conv2d_forward, cross_entropy_loss, dropout, fc_backward, fc_forward,
    l2_penalty, maxpool_backward, maxpool_forward, pool_output_dim, relu, relu_backward, sigmoid,
    xavier_init, ConvCache, DropoutMask, LayerParams, LossReport, ParamGrads, PoolIndices, Real,
    Tensor,
};

pub use train::{train, train_step, TraceRecord, TrainConfig, TrainingTrace};

/// Output channels of the four convolutions.
pub const CONV_CHANNELS: [usize; 4] = [16, 16, 32, 32];
/// Width of the two hidden dense layers.
pub const HIDDEN_UNITS: usize = 64;
const KERNEL: usize = 3;
const POOL: usize = 2;
/// Samples per forward/backward work unit. Fixed so gradient reduction
/// order does not depend on the thread count.
const CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub geometry: PatchGeometry,
    pub dropout_p: f64,
    pub beta: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            geometry: PatchGeometry::default(),
            dropout_p: 0.5,
            beta: 0.0005,
        }
    }
}

/// Side length after the two pooling stages and the flattened width.
pub fn flatten_len(geometry: PatchGeometry) -> Result<usize> {
    let side = geometry.patch_side();
    let after = pool_output_dim(pool_output_dim(side, POOL, POOL)?, POOL, POOL)?;
    Ok(after * after * CONV_CHANNELS[3])
}

/// Weights of the full network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    channels: usize,
    geometry: PatchGeometry,
    layers: Vec<LayerParams<T>>,
}

/// Xavier-initialized weights and zero biases, deterministic in `seed`.
pub fn build_network<T: Real>(config: &NetworkConfig, seed: u64) -> Result<ModelParams<T>> {
    let c = config.input_channels;
    if c != 1 && c != 3 {
        return Err(Error::InvalidArgument(format!(
            "input channels must be 1 or 3, got {c}"
        )));
    }
    let geometry = PatchGeometry::new(config.geometry.half_width, config.geometry.structure)?;
    let flat = flatten_len(geometry)?;
    let mut rng = stream(seed, &[tag::INIT]);
    let mut layers = Vec::with_capacity(7);
    let mut cin = c;
    for &cout in &CONV_CHANNELS {
        let fan_in = cin * KERNEL * KERNEL;
        let fan_out = cout * KERNEL * KERNEL;
        let w = xavier_init(&[cout, KERNEL, KERNEL, cin], fan_in, fan_out, &mut rng)?;
        layers.push(LayerParams::conv(w, Tensor::zeros(&[cout]))?);
        cin = cout;
    }
    for (fan_in, fan_out) in [
        (flat, HIDDEN_UNITS),
        (HIDDEN_UNITS, HIDDEN_UNITS),
        (HIDDEN_UNITS, geometry.label_len()),
    ] {
        let w = xavier_init(&[fan_out, fan_in], fan_in, fan_out, &mut rng)?;
        layers.push(LayerParams::dense(w, Tensor::zeros(&[fan_out]))?);
    }
    Ok(ModelParams {
        channels: c,
        geometry,
        layers,
    })
}

/// Activations kept from a training forward pass.
pub struct Tape<T> {
    conv: Vec<ConvCache<T>>,
    /// Post-ReLU conv outputs (the mask for the ReLU backward).
    conv_out: Vec<Tensor<T>>,
    pools: Vec<PoolIndices>,
    flat: Tensor<T>,
    hidden: Vec<Tensor<T>>,
    dropped: Vec<Tensor<T>>,
    masks: Vec<DropoutMask<T>>,
    pool_shape: Vec<usize>,
    stage_shapes: Vec<Vec<usize>>,
}

impl<T> Tape<T> {
    /// Per-sample output shape of every stage: four convs and two pools in
    /// order, the flatten, the three dense layers.
    pub fn stage_shapes(&self) -> &[Vec<usize>] {
        &self.stage_shapes
    }
}

impl<T: Real> ModelParams<T> {
    /// Reassembles a model from explicit layers, validating the plan.
    pub fn from_layers(
        channels: usize,
        geometry: PatchGeometry,
        layers: Vec<LayerParams<T>>,
    ) -> Result<Self> {
        let reference = build_network::<T>(
            &NetworkConfig {
                input_channels: channels,
                geometry,
                ..Default::default()
            },
            0,
        )?;
        if layers.len() != reference.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} layers, got {}",
                reference.layers.len(),
                layers.len()
            )));
        }
        for (i, (a, b)) in layers.iter().zip(&reference.layers).enumerate() {
            if a.kind != b.kind || a.weights.shape() != b.weights.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: expected {:?} {:?}, got {:?} {:?}",
                    b.kind,
                    b.weights.shape(),
                    a.kind,
                    a.weights.shape()
                )));
            }
        }
        Ok(Self {
            channels,
            geometry,
            layers,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.geometry
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.layers
    }

    pub fn output_len(&self) -> usize {
        self.geometry.label_len()
    }

    pub fn input_len(&self) -> usize {
        self.geometry.patch_side().pow(2) * self.channels
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::param_count).sum()
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.layers.first().map_or(0, |l| l.step_count)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            channels: self.channels,
            geometry: self.geometry,
            layers: self.layers.iter().map(LayerParams::cast).collect(),
        }
    }

    fn batch_shape(&self, inputs: &Tensor<T>) -> Result<usize> {
        let side = self.geometry.patch_side();
        match *inputs.shape() {
            [n, h, w, c] if h == side && w == side && c == self.channels => Ok(n),
            _ => Err(Error::ShapeMismatch(format!(
                "expected N×{side}×{side}×{} patches, got {:?}",
                self.channels,
                inputs.shape()
            ))),
        }
    }

    /// Forward pass over an `N×(2h+1)×(2h+1)×C` batch keeping everything the
    /// backward pass needs. Returns the pre-sigmoid logits `N×s²`.
    pub fn forward_tape<R: Rng + ?Sized>(
        &self,
        inputs: &Tensor<T>,
        dropout_p: f64,
        mut rng: Option<&mut R>,
    ) -> Result<(Tensor<T>, Tape<T>)> {
        let n = self.batch_shape(inputs)?;
        let mut stage_shapes = Vec::new();
        let mut conv = Vec::with_capacity(4);
        let mut conv_out = Vec::with_capacity(4);
        let mut pools = Vec::with_capacity(2);

        let mut x = inputs.clone();
        for (i, layer) in self.layers[..4].iter().enumerate() {
            let (y, cache) = conv2d_forward(&x, layer, 1, 1)?;
            let y = relu(&y);
            stage_shapes.push(y.shape()[1..].to_vec());
            conv.push(cache);
            conv_out.push(y.clone());
            x = y;
            if i % 2 == 1 {
                let (p, idx) = maxpool_forward(&x, POOL, POOL)?;
                stage_shapes.push(p.shape()[1..].to_vec());
                pools.push(idx);
                x = p;
            }
        }
        let pool_shape = x.shape().to_vec();
        let flat_len = x.len() / n;
        let flat = x.reshape(&[n, flat_len])?;
        stage_shapes.push(vec![flat_len]);

        let mut hidden = Vec::with_capacity(2);
        let mut dropped = Vec::with_capacity(2);
        let mut masks = Vec::with_capacity(2);
        let mut h = flat.clone();
        for layer in &self.layers[4..6] {
            let z = relu(&fc_forward(&h, layer)?);
            stage_shapes.push(vec![z.shape()[1]]);
            let (d, mask) = match rng.as_deref_mut() {
                Some(r) => dropout(&z, dropout_p, r, true)?,
                None => (z.clone(), DropoutMask::identity(z.len())),
            };
            hidden.push(z);
            masks.push(mask);
            dropped.push(d.clone());
            h = d;
        }
        let logits = fc_forward(&h, &self.layers[6])?;
        stage_shapes.push(vec![logits.shape()[1]]);
        Ok((
            logits,
            Tape {
                conv,
                conv_out,
                pools,
                flat,
                hidden,
                dropped,
                masks,
                pool_shape,
                stage_shapes,
            },
        ))
    }

    /// Backpropagates a gradient on the logits through a recorded tape.
    pub fn backward(&self, tape: &Tape<T>, grad_logits: &Tensor<T>) -> Result<Vec<ParamGrads<T>>> {
        if tape.conv.len() != 4 || tape.dropped.len() != 2 {
            return Err(Error::MissingCache("network tape is incomplete"));
        }
        let mut grads: Vec<ParamGrads<T>> =
            self.layers.iter().map(ParamGrads::zeros_like).collect();

        let mut g = fc_backward(
            grad_logits,
            &tape.dropped[1],
            &self.layers[6],
            &mut grads[6],
        )?;
        for k in (0..2).rev() {
            let layer = 4 + k;
            let g_hidden = tape.masks[k].backward(&g)?;
            let g_z = relu_backward(&g_hidden, &tape.hidden[k])?;
            let input = if k == 0 { &tape.flat } else { &tape.dropped[0] };
            g = fc_backward(&g_z, input, &self.layers[layer], &mut grads[layer])?;
        }
        let mut g = g.reshape(&tape.pool_shape)?;
        for i in (0..4).rev() {
            if i % 2 == 1 {
                g = maxpool_backward(&g, &tape.pools[i / 2])?;
            }
            let g_pre = relu_backward(&g, &tape.conv_out[i])?;
            match conv2d_backward(&g_pre, &tape.conv[i], &self.layers[i], &mut grads[i], i > 0)? {
                Some(next) => g = next,
                None => break,
            }
        }
        Ok(grads)
    }

    /// Inference on a batch: sigmoid outputs `N×s²`. Work is split into
    /// fixed chunks evaluated in parallel; results do not depend on the
    /// thread count.
    pub fn predict(&self, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.batch_shape(inputs)?;
        let per = self.input_len();
        let out_len = self.output_len();
        let side = self.geometry.patch_side();
        let chunks: Vec<Vec<T>> = inputs
            .data()
            .par_chunks(CHUNK * per)
            .map(|chunk| {
                let m = chunk.len() / per;
                let x = Tensor::from_vec(&[m, side, side, self.channels], chunk.to_vec())?;
                let (logits, _) = self.forward_tape::<rand_chacha::ChaCha8Rng>(&x, 0.0, None)?;
                Ok(sigmoid(&logits).into_data())
            })
            .collect::<Result<_>>()?;
        Tensor::from_vec(&[n, out_len], chunks.concat())
    }

    /// Single-patch forward. In training mode dropout is drawn from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        patch: &[T],
        training: bool,
        dropout_p: f64,
        rng: &mut R,
    ) -> Result<Vec<T>> {
        let side = self.geometry.patch_side();
        let x = Tensor::from_vec(&[1, side, side, self.channels], patch.to_vec())?;
        let rng = if training { Some(rng) } else { None };
        let (logits, _) = self.forward_tape(&x, dropout_p, rng)?;
        Ok(sigmoid(&logits).into_data())
    }

    /// Per-sample shapes of every stage for one zero patch.
    pub fn stage_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let side = self.geometry.patch_side();
        let x = Tensor::zeros(&[1, side, side, self.channels]);
        let (_, tape) = self.forward_tape::<rand_chacha::ChaCha8Rng>(&x, 0.0, None)?;
        Ok(tape.stage_shapes)
    }

    /// Evaluates `L' = mean_batch(Σ_units CE) + β·½ΣW²` and fills every
    /// layer's gradient buffers with `∂L'/∂θ`, ready for an optimizer step.
    ///
    /// `dropout` is `(p, seed)`; `None` disables it.
    pub fn compute_gradients(
        &mut self,
        inputs: &Tensor<T>,
        labels: &Tensor<T>,
        beta: f64,
        dropout: Option<(f64, u64)>,
    ) -> Result<LossReport> {
        let n = self.batch_shape(inputs)?;
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        labels.expect_shape(&[n, self.output_len()])?;
        let (ce, grads) = self.loss_and_grads(inputs, labels, dropout)?;
        for (layer, g) in self.layers.iter_mut().zip(&grads) {
            layer.zero_grads();
            layer.accumulate(g)?;
        }
        l2_penalty(&mut self.layers, beta)?;
        let half_sq: f64 = self
            .layers
            .iter()
            .map(|l| 0.5 * l.weights.sum_squares().as_f64())
            .sum();
        Ok(LossReport::new(ce, half_sq, beta))
    }

    /// Batch-mean cross-entropy and its parameter gradients (no penalty).
    fn loss_and_grads(
        &self,
        inputs: &Tensor<T>,
        labels: &Tensor<T>,
        dropout: Option<(f64, u64)>,
    ) -> Result<(f64, Vec<ParamGrads<T>>)> {
        let n = inputs.shape()[0];
        let per = self.input_len();
        let out_len = self.output_len();
        let side = self.geometry.patch_side();
        let scale = T::from_f64_lossy(1.0 / n as f64);
        let parts: Vec<(f64, Vec<ParamGrads<T>>)> = inputs
            .data()
            .par_chunks(CHUNK * per)
            .zip(labels.data().par_chunks(CHUNK * out_len))
            .enumerate()
            .map(|(k, (xs, ys))| {
                let m = xs.len() / per;
                let x = Tensor::from_vec(&[m, side, side, self.channels], xs.to_vec())?;
                let y = Tensor::from_vec(&[m, out_len], ys.to_vec())?;
                let (logits, tape) = match dropout {
                    Some((p, seed)) => {
                        let mut rng = stream(derive_seed(seed, &[k as u64]), &[tag::DROPOUT]);
                        self.forward_tape(&x, p, Some(&mut rng))?
                    }
                    None => self.forward_tape::<rand_chacha::ChaCha8Rng>(&x, 0.0, None)?,
                };
                let probs = sigmoid(&logits);
                let (ce, _) = cross_entropy_loss(&probs, &y)?;
                // the probability clamp would hide a non-finite logit
                let ce = if logits.data().iter().all(|v| v.is_finite()) {
                    ce.as_f64()
                } else {
                    f64::NAN
                };
                // fused sigmoid + cross-entropy: ∂L/∂logit = ŷ − y
                let data = probs
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &t)| (p - t) * scale)
                    .collect();
                let grad_logits = Tensor::from_vec(logits.shape(), data)?;
                Ok((ce, self.backward(&tape, &grad_logits)?))
            })
            .collect::<Result<_>>()?;

        let mut total_ce = 0.0;
        let mut grads: Vec<ParamGrads<T>> =
            self.layers.iter().map(ParamGrads::zeros_like).collect();
        for (ce, g) in parts {
            total_ce += ce;
            for (acc, part) in grads.iter_mut().zip(&g) {
                acc.add_assign(part)?;
            }
        }
        Ok((total_ce / n as f64, grads))
    }

    /// Loss report without touching gradients.
    pub fn evaluate_loss(
        &self,
        inputs: &Tensor<T>,
        labels: &Tensor<T>,
        beta: f64,
    ) -> Result<LossReport> {
        let probs = self.predict(inputs)?;
        let (ce, _) = cross_entropy_loss(&probs, labels)?;
        let half_sq: f64 = self
            .layers
            .iter()
            .map(|l| 0.5 * l.weights.sum_squares().as_f64())
            .sum();
        Ok(LossReport::new(
            ce.as_f64() / inputs.shape()[0] as f64,
            half_sq,
            beta,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(channels: usize, s: usize) -> NetworkConfig {
        NetworkConfig {
            input_channels: channels,
            geometry: PatchGeometry::new(13, s).unwrap(),
            ..Default::default()
        }
    }

    #[test]
    fn output_widths() {
        let m = build_network::<f32>(&config(3, 5), 0).unwrap();
        assert_eq!(m.layers().last().unwrap().out_features(), 25);
        let m = build_network::<f32>(&config(1, 1), 0).unwrap();
        assert_eq!(m.layers().last().unwrap().out_features(), 1);
        for (s, units) in [(1, 1), (3, 9), (5, 25), (7, 49)] {
            assert_eq!(
                build_network::<f32>(&config(1, s), 0).unwrap().output_len(),
                units
            );
        }
    }

    #[test]
    fn table_two_shapes() {
        let m = build_network::<f32>(&config(3, 5), 0).unwrap();
        let shapes = m.stage_shapes().unwrap();
        let expect: Vec<Vec<usize>> = vec![
            vec![27, 27, 16],
            vec![27, 27, 16],
            vec![13, 13, 16],
            vec![13, 13, 32],
            vec![13, 13, 32],
            vec![6, 6, 32],
            vec![1152],
            vec![64],
            vec![64],
            vec![25],
        ];
        assert_eq!(shapes, expect);
        assert_eq!(flatten_len(PatchGeometry::default()).unwrap(), 1152);
    }

    #[test]
    fn seeds_change_values_not_sizes() {
        let a = build_network::<f32>(&config(3, 5), 1).unwrap();
        let b = build_network::<f32>(&config(3, 5), 2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_ne!(a, b);
        assert_eq!(a, build_network::<f32>(&config(3, 5), 1).unwrap());
        assert!(a.layers().iter().all(|l| l.biases.sum_squares() == 0.0));
    }

    #[test]
    fn inference_is_deterministic_and_bounded() {
        let m = build_network::<f32>(&config(1, 5), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let patch: Vec<f32> = (0..729).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = m.forward(&patch, false, 0.5, &mut rng).unwrap();
        let b = m.forward(&patch, false, 0.5, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 25);
        assert!(a.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn predict_matches_single_patch_forward() {
        let m = build_network::<f64>(&config(1, 3), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 40;
        let x = Tensor::from_fn(&[n, 27, 27, 1], |_| rng.random_range(-1.0..1.0));
        let batch = m.predict(&x).unwrap();
        for i in [0, 17, 39] {
            let one = m
                .forward(&x.data()[i * 729..(i + 1) * 729], false, 0.0, &mut rng)
                .unwrap();
            for (a, b) in one.iter().zip(&batch.data()[i * 9..(i + 1) * 9]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = build_network::<f32>(&config(3, 5), 0).unwrap();
        assert!(m.predict(&Tensor::zeros(&[2, 27, 27, 1])).is_err());
        assert!(build_network::<f32>(&config(2, 5), 0).is_err());
    }

    #[test]
    fn duplicated_batch_has_same_loss() {
        let mut m = build_network::<f64>(&config(1, 3), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&[3, 27, 27, 1], |_| rng.random_range(-1.0..1.0));
        let y = Tensor::from_fn(&[3, 9], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let a = m.compute_gradients(&x, &y, 0.0, None).unwrap();
        let x2 = Tensor::from_vec(&[6, 27, 27, 1], [x.data(), x.data()].concat()).unwrap();
        let y2 = Tensor::from_vec(&[6, 9], [y.data(), y.data()].concat()).unwrap();
        let b = m.compute_gradients(&x2, &y2, 0.0, None).unwrap();
        assert!((a.cross_entropy - b.cross_entropy).abs() < 1e-12);
    }

    #[test]
    fn penalty_accounting() {
        let mut m = build_network::<f64>(&config(1, 1), 2).unwrap();
        let x = Tensor::zeros(&[2, 27, 27, 1]);
        let y = Tensor::zeros(&[2, 1]);
        let r = m.compute_gradients(&x, &y, 0.0005, None).unwrap();
        let half_sq: f64 = m
            .layers()
            .iter()
            .map(|l| 0.5 * l.weights.sum_squares())
            .sum();
        assert_eq!(r.penalty, half_sq);
        assert!((r.total - r.cross_entropy - 0.0005 * half_sq).abs() < 1e-15);
    }
}
