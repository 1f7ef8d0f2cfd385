use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gmm::SgmmTensor;
use crate::nn::{
    AvgPool3d, BatchNorm3d, BiLstm, Conv3d, Conv3dGeometry, Dense, FlattenSteps, Layer, MaxPool3d, MeanOverTime,
    Mode, ParamStore, PoolGeometry, Relu, SelfAttention, Tensor,
};
use crate::seed;

/// One spatial convolution block: conv, batch norm, ReLU, max pool.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockSpec {
    pub channels: usize,
    /// Kernel extent on (T, H, W). The time extent must be odd and is padded
    /// to keep T unchanged; spatial axes use "same" padding too.
    pub kernel: [usize; 3],
    /// Max-pool window on (H, W); pooling never touches T.
    pub pool: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureConfig {
    /// Cepstra per frame, the H axis.
    pub n_ceps: usize,
    /// Mixture components (or twice that with covariances), the W axis.
    pub n_components: usize,
    /// Segments, the T axis.
    pub n_segments: usize,
    pub pointwise_channels: usize,
    pub blocks: Vec<ConvBlockSpec>,
    /// Average-pool window on (H, W) after the last block.
    pub final_pool: [usize; 2],
    pub hidden: usize,
    pub attention: bool,
    pub n_classes: usize,
}

impl ArchitectureConfig {
    /// The toy architecture: 1x1x1 conv to 8 channels, conv blocks of 16 and
    /// 32 channels with 3x3 spatial kernels, BiLSTM with 64 units per direction.
    pub fn toy(n_ceps: usize, n_components: usize, n_segments: usize, n_classes: usize) -> Self {
        let block = |channels| ConvBlockSpec {
            channels,
            kernel: [1, 3, 3],
            pool: [2, 2],
        };
        Self {
            n_ceps,
            n_components,
            n_segments,
            pointwise_channels: 8,
            blocks: vec![block(16), block(32)],
            final_pool: [2, 2],
            hidden: 64,
            attention: true,
            n_classes,
        }
    }

    /// Shape of the spatial feature map entering the flatten step, `[C, T, H, W]`.
    pub fn feature_map(&self) -> Result<[usize; 4]> {
        if self.n_ceps == 0 || self.n_components == 0 || self.n_segments == 0 {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        if self.pointwise_channels == 0 || self.hidden == 0 {
            return Err(Error::Config("channel and hidden sizes must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        let (mut h, mut w) = (self.n_ceps, self.n_components);
        let mut c = self.pointwise_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
                return Err(Error::Config(format!(
                    "block {i}: kernel extents must be odd and channels positive, got {:?} / {}",
                    b.kernel, b.channels
                )));
            }
            (h, w) = pooled(h, w, b.pool, &format!("block {i} max pool"))?;
            c = b.channels;
        }
        (h, w) = pooled(h, w, self.final_pool, "final average pool")?;
        Ok([c, self.n_segments, h, w])
    }

    /// Width of the per-step feature vector fed to the BiLSTM.
    pub fn step_features(&self) -> Result<usize> {
        let [c, _, h, w] = self.feature_map()?;
        Ok(c * h * w)
    }
}

fn pooled(h: usize, w: usize, pool: [usize; 2], what: &str) -> Result<(usize, usize)> {
    if pool.contains(&0) || pool[0] > h || pool[1] > w {
        return Err(Error::Config(format!(
            "{what}: window {pool:?} does not fit a {h}x{w} map"
        )));
    }
    Ok((h / pool[0], w / pool[1]))
}

const INPUT_MEAN: &str = "input.mean";
const INPUT_SCALE: &str = "input.scale";
const SCALE_FLOOR: f64 = 1e-4;

/// The C3D-BiLSTM classifier: spatial 3D convolutions per time step, a
/// BiLSTM over segments, self-attention, mean over time and a dense head.
pub struct C3dBiLstm {
    arch: ArchitectureConfig,
    store: ParamStore,
    layers: Vec<Box<dyn Layer>>,
}

impl C3dBiLstm {
    pub fn new(arch: &ArchitectureConfig, seed_value: u64) -> Result<Self> {
        let step = arch.step_features()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_seed(seed_value, &[seed::TAG_INIT]));
        let mut store = ParamStore::new();
        let n_in = arch.n_segments * arch.n_ceps * arch.n_components;
        store.add_buffer(INPUT_MEAN, Tensor::zeros(&[n_in]))?;
        store.add_buffer(INPUT_SCALE, Tensor::new(vec![n_in], vec![1.0; n_in])?)?;
        let mut layers: Vec<Box<dyn Layer>> = Vec::new();
        layers.push(Box::new(Conv3d::new(
            "pointwise",
            &mut store,
            1,
            arch.pointwise_channels,
            [1, 1, 1],
            Conv3dGeometry::default(),
            &mut rng,
        )?));
        let mut c_in = arch.pointwise_channels;
        for (i, b) in arch.blocks.iter().enumerate() {
            let name = format!("block{}", i + 1);
            let geom = Conv3dGeometry {
                stride: [1; 3],
                padding: [b.kernel[0] / 2, b.kernel[1] / 2, b.kernel[2] / 2],
            };
            layers.push(Box::new(Conv3d::new(
                &format!("{name}.conv"),
                &mut store,
                c_in,
                b.channels,
                b.kernel,
                geom,
                &mut rng,
            )?));
            layers.push(Box::new(BatchNorm3d::new(&format!("{name}.bn"), &mut store, b.channels)?));
            layers.push(Box::new(Relu::new(&format!("{name}.relu"))));
            layers.push(Box::new(MaxPool3d::new(
                &format!("{name}.pool"),
                PoolGeometry::square([1, b.pool[0], b.pool[1]]),
            )));
            c_in = b.channels;
        }
        layers.push(Box::new(AvgPool3d::new(
            "avgpool",
            PoolGeometry::square([1, arch.final_pool[0], arch.final_pool[1]]),
        )));
        layers.push(Box::new(FlattenSteps::new("flatten")));
        layers.push(Box::new(BiLstm::new("bilstm", &mut store, step, arch.hidden, &mut rng)?));
        if arch.attention {
            layers.push(Box::new(SelfAttention::new("attention")));
        }
        layers.push(Box::new(MeanOverTime::new("mean")));
        layers.push(Box::new(Dense::new("head", &mut store, 2 * arch.hidden, arch.n_classes, &mut rng)?));
        Ok(Self {
            arch: arch.clone(),
            store,
            layers,
        })
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn n_trainable(&self) -> usize {
        self.store.n_trainable()
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name()).collect()
    }

    /// Shape after every layer for a batch of `batch` inputs.
    pub fn trace_shapes(&self, batch: usize) -> Result<Vec<(String, Vec<usize>)>> {
        let mut shape = self.input_shape(batch);
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            shape = l.output_shape(&shape)?;
            out.push((l.name().to_string(), shape.clone()));
        }
        Ok(out)
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, 1, self.arch.n_segments, self.arch.n_ceps, self.arch.n_components]
    }

    /// Fits the per-element input standardisation on training tensors.
    /// Elements that barely vary keep a bounded scale.
    pub fn fit_input_standardization(&mut self, tensors: &[&SgmmTensor]) -> Result<()> {
        if tensors.is_empty() {
            return Err(Error::Data("cannot standardise on an empty set".into()));
        }
        let raw = self.raw_input(tensors)?;
        let n_in = raw.len() / tensors.len();
        let n = tensors.len() as f64;
        let mut mean = vec![0.0; n_in];
        for row in raw.chunks_exact(n_in) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; n_in];
        for row in raw.chunks_exact(n_in) {
            var.iter_mut().zip(row.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
        }
        let scale = var.iter().map(|v| 1.0 / (v + SCALE_FLOOR).sqrt()).collect();
        self.set_buffer(INPUT_MEAN, mean)?;
        self.set_buffer(INPUT_SCALE, scale)
    }

    fn set_buffer(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::Config(format!("missing buffer {name}")))?;
        *self.store.value_mut(id) = Tensor::new(vec![data.len()], data)?;
        Ok(())
    }

    /// Packs SGMM tensors `M x G x T` into the network input `[B, 1, T, M, G]`
    /// and applies the input standardisation.
    pub fn batch_input(&self, tensors: &[&SgmmTensor]) -> Result<Tensor> {
        let mut data = self.raw_input(tensors)?;
        let mean = self.buffer(INPUT_MEAN)?;
        let scale = self.buffer(INPUT_SCALE)?;
        for row in data.chunks_exact_mut(mean.len()) {
            for ((v, m), s) in row.iter_mut().zip(mean).zip(scale) {
                *v = (*v - m) * s;
            }
        }
        Tensor::new(self.input_shape(tensors.len()), data)
    }

    fn buffer(&self, name: &str) -> Result<&[f64]> {
        self.store
            .id(name)
            .map(|id| self.store.value(id).data())
            .ok_or_else(|| Error::Config(format!("missing buffer {name}")))
    }

    fn raw_input(&self, tensors: &[&SgmmTensor]) -> Result<Vec<f64>> {
        let (m, g, t) = (self.arch.n_ceps, self.arch.n_components, self.arch.n_segments);
        let mut data = Vec::with_capacity(tensors.len() * m * g * t);
        for s in tensors {
            if s.dims() != (m, g, t) {
                return Err(Error::Shape(format!(
                    "SGMM tensor {:?} does not match the architecture ({m}, {g}, {t})",
                    s.dims()
                )));
            }
            for ti in 0..t {
                data.extend(s.slice_t(ti));
            }
        }
        Ok(data)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&mut self.store, &h, mode)?;
        }
        Ok(h)
    }

    /// Backpropagates `d loss / d logits` through the stack, accumulating
    /// parameter gradients, and returns the gradient for the input.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Tensor> {
        let mut g = grad_logits.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&mut self.store, &g)?;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn toy_shapes_and_parameter_count() {
        let arch = ArchitectureConfig::toy(12, 8, 4, 5);
        let mut model = C3dBiLstm::new(&arch, 1).unwrap();
        // pointwise 1*8+8, conv 8*16*9+16, bn 2*16, conv 16*32*9+32, bn 2*32,
        // two LSTM directions of 4*64*32 + 4*64*64 + 3*64 + 4*64, dense 128*5+5
        let hand = 16 + 1168 + 32 + 4640 + 64 + 2 * 25024 + 645;
        assert_eq!(hand, 56613);
        assert_eq!(model.n_trainable(), hand);
        let x = Tensor::filled(&model.input_shape(3), 0.5);
        let y = model.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[3, 5]);
        for (name, shape) in model.trace_shapes(3).unwrap() {
            if shape.len() == 5 {
                assert_eq!(shape[2], 4, "{name} changed T");
            }
            if name == "flatten" {
                assert_eq!(shape, vec![3, 4, 32]);
            }
        }
    }

    #[test]
    fn input_standardization_centres_training_tensors() {
        use crate::gmm::SgmmMeta;
        let arch = ArchitectureConfig::toy(8, 8, 2, 2);
        let mut model = C3dBiLstm::new(&arch, 3).unwrap();
        let meta = SgmmMeta { n_components: 8, frames_per_segment: 1, relevance: 16.0, append_covariances: false };
        let tensors: Vec<SgmmTensor> = (0..4)
            .map(|k| {
                let data = (0..128).map(|i| ((i * 7 + k * 13) % 11) as f64 / 10.0).collect();
                SgmmTensor::new(data, (8, 8, 2), meta).unwrap()
            })
            .collect();
        let refs: Vec<&SgmmTensor> = tensors.iter().collect();
        let raw = model.batch_input(&refs).unwrap();
        assert_eq!(raw.data(), model.raw_input(&refs).unwrap().as_slice());
        model.fit_input_standardization(&refs).unwrap();
        let x = model.batch_input(&refs).unwrap();
        for j in 0..128 {
            let col: Vec<f64> = (0..4).map(|b| x.data()[b * 128 + j]).collect();
            assert!(col.iter().sum::<f64>().abs() < 1e-9);
        }
        assert!(model.fit_input_standardization(&[]).is_err());
    }

    #[test]
    fn rejects_unpoolable_inputs() {
        let arch = ArchitectureConfig::toy(4, 2, 4, 5);
        assert!(matches!(C3dBiLstm::new(&arch, 1), Err(Error::Config(_))));
        let mut even = ArchitectureConfig::toy(12, 8, 4, 5);
        even.blocks[0].kernel = [2, 3, 3];
        assert!(even.feature_map().is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let arch = ArchitectureConfig::toy(12, 8, 2, 3);
        let a = C3dBiLstm::new(&arch, 9).unwrap();
        let b = C3dBiLstm::new(&arch, 9).unwrap();
        let c = C3dBiLstm::new(&arch, 10).unwrap();
        let values = |m: &C3dBiLstm| m.store().params().iter().map(|p| p.value.clone()).collect::<Vec<_>>();
        assert_eq!(values(&a), values(&b));
        assert_ne!(values(&a), values(&c));
    }

    #[test]
    fn whole_network_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut arch = ArchitectureConfig::toy(8, 8, 3, 3);
        arch.pointwise_channels = 2;
        arch.blocks[0].channels = 3;
        arch.blocks[1].channels = 2;
        arch.blocks[1].kernel = [3, 3, 3];
        arch.hidden = 3;
        let mut model = C3dBiLstm::new(&arch, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = model.input_shape(2);
        let n: usize = shape.iter().product();
        let x = Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let r = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        model.store_mut().zero_grads();
        model.forward(&x, Mode::Train).unwrap();
        let gx = model.backward(&r).unwrap();
        let h = 1e-5;
        let loss = |model: &mut C3dBiLstm, x: &Tensor| model.forward(x, Mode::Train).unwrap().dot(&r);
        let mut worst = 0.0f64;
        let mut xp = x.clone();
        for i in (0..n).step_by(7) {
            let o = xp.data()[i];
            xp.data_mut()[i] = o + h;
            let up = loss(&mut model, &xp);
            xp.data_mut()[i] = o - h;
            let down = loss(&mut model, &xp);
            xp.data_mut()[i] = o;
            worst = worst.max(crate::nn::gradcheck::relative_error(gx.data()[i], (up - down) / (2.0 * h)));
        }
        let grads: Vec<(usize, Vec<f64>)> = model
            .store()
            .params()
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| (k, p.grad.data().to_vec()))
            .collect();
        let ids: Vec<_> = model.store().ids().collect();
        for (k, g) in grads {
            for i in (0..g.len()).step_by(3) {
                let o = model.store().value(ids[k]).data()[i];
                model.store_mut().value_mut(ids[k]).data_mut()[i] = o + h;
                let up = loss(&mut model, &x);
                model.store_mut().value_mut(ids[k]).data_mut()[i] = o - h;
                let down = loss(&mut model, &x);
                model.store_mut().value_mut(ids[k]).data_mut()[i] = o;
                worst = worst.max(crate::nn::gradcheck::relative_error(g[i], (up - down) / (2.0 * h)));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst:e}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn time_axis_reaches_the_bilstm(m in 8usize..20, g in 8usize..14, t in 1usize..7, kt in 0usize..2) {
            let mut arch = ArchitectureConfig::toy(m, g, t, 3);
            arch.blocks[1].kernel[0] = 2 * kt + 1;
            arch.hidden = 4;
            let model = C3dBiLstm::new(&arch, 0).unwrap();
            let trace = model.trace_shapes(2).unwrap();
            let flat = trace.iter().find(|(n, _)| n == "flatten").unwrap();
            prop_assert_eq!(flat.1[1], t);
            prop_assert_eq!(flat.1[2], arch.step_features().unwrap());
        }
    }
}
