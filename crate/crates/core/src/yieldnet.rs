//! Plot-level yield regression.
//!
//! A frozen feature extractor turns each of a plot's twenty sampled frames
//! into a `C x H x W` feature map. The ten maps of each row side are summed
//! and the two sums concatenated along the channel axis. The regression head
//! is `conv 3x3 -> ReLU -> max-pool 2x2 -> flatten -> fc1 -> ReLU -> fc2 ->
//! ReLU -> fc3`, producing one yield value (t/ha) per plot.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, RawPlanar};
use crate::sampler::FRAMES_PER_SIDE;
use crate::tensornet::ops::{self, ConvSpec};
use crate::tensornet::{
    adam_step, he_uniform, load_checkpoint, save_checkpoint, AdamConfig, AdamState, Real, Tape,
    Tensor, Var,
};

/// Maps an RGB image to a `C x H' x W'` feature map. Implementations must be
/// deterministic and are never updated by yield training.
pub trait FeatureExtractor<T: Real>: Send + Sync {
    fn channels(&self) -> usize;

    /// Feature map height and width for an input of `height x width`.
    fn output_dims(&self, height: usize, width: usize) -> (usize, usize);

    fn extract(&self, img: &Image) -> Result<Tensor<T>>;
}

/// Converts an interleaved image into a `[1, C, H, W]` tensor.
pub fn image_tensor<T: Real>(img: &Image) -> Tensor<T> {
    let data = img
        .to_planar()
        .into_iter()
        .map(|v| T::of(v as f64))
        .collect();
    Tensor::from_vec(&[1, img.channels(), img.height(), img.width()], data).expect("image shape")
}

#[derive(Debug, Clone, PartialEq)]
struct ConvLayer<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
}

/// Small stand-in backbone: three 3x3 stride-2 convolutions (3 -> 16 -> 32 -> C)
/// with ReLU, downsampling by 8.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceExtractor<T = f64> {
    layers: Vec<ConvLayer<T>>,
}

const EXTRACTOR_SPEC: ConvSpec = ConvSpec {
    stride: 2,
    padding: 1,
};

impl<T: Real> ReferenceExtractor<T> {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [3, 16, 32, channels];
        let layers = widths
            .windows(2)
            .map(|w| ConvLayer {
                weight: he_uniform(&[w[1], w[0], 3, 3], w[0] * 9, &mut rng),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        ReferenceExtractor { layers }
    }

    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("extractor.conv{}.weight", i + 1), &l.weight),
                    (format!("extractor.conv{}.bias", i + 1), &l.bias),
                ]
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let params = self.parameters();
        let named: Vec<(&str, &Tensor<T>)> = params.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        save_checkpoint(path, &named)
    }
}

impl<T: Real> FeatureExtractor<T> for ReferenceExtractor<T> {
    fn channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.len())
    }

    fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let down = |d: usize| self.layers.iter().fold(d, |d, _| d.div_ceil(2));
        (down(height), down(width))
    }

    fn extract(&self, img: &Image) -> Result<Tensor<T>> {
        if img.channels() != 3 {
            return Err(Error::Shape(format!(
                "feature extraction needs RGB input, got {} channels",
                img.channels()
            )));
        }
        let mut x = image_tensor::<T>(img);
        for l in &self.layers {
            x = ops::relu(&ops::conv2d(&x, &l.weight, &l.bias, EXTRACTOR_SPEC)?);
        }
        let s = x.shape().to_vec();
        x.reshape(&s[1..])
    }
}

/// Reads a feature map stored as a `FIMG` file (channels = feature depth).
pub fn load_feature_map<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let raw = RawPlanar::read(path)?;
    Tensor::from_vec(
        &[raw.channels, raw.height, raw.width],
        raw.data.into_iter().map(|v| T::of(v as f64)).collect(),
    )
}

pub fn save_feature_map<T: Real>(path: impl AsRef<Path>, map: &Tensor<T>) -> Result<()> {
    let [c, h, w] = *map.shape() else {
        return Err(Error::Shape(format!(
            "feature map must be 3-D, got {:?}",
            map.shape()
        )));
    };
    RawPlanar {
        width: w,
        height: h,
        channels: c,
        data: map.data().iter().map(|v| v.as_f64() as f32).collect(),
    }
    .write(path)
}

/// Sums each side's ten maps and concatenates the two sums along channels.
///
/// Each element is summed in ascending value order, so the result does not
/// depend on the order of maps within a side.
pub fn fuse<T: Real>(side_a: &[Tensor<T>], side_b: &[Tensor<T>]) -> Result<Tensor<T>> {
    if side_a.len() != FRAMES_PER_SIDE || side_b.len() != FRAMES_PER_SIDE {
        return Err(Error::Shape(format!(
            "fusion needs {FRAMES_PER_SIDE} maps per side, got {} and {}",
            side_a.len(),
            side_b.len()
        )));
    }
    let shape = side_a[0].shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "feature maps must be 3-D, got {shape:?}"
        )));
    }
    if let Some(bad) = side_a
        .iter()
        .chain(side_b)
        .find(|m| m.shape() != shape.as_slice())
    {
        return Err(Error::Shape(format!(
            "feature map {:?} does not match {shape:?}",
            bad.shape()
        )));
    }
    let side_sum = |maps: &[Tensor<T>]| -> Vec<T> {
        let mut buf = [T::zero(); FRAMES_PER_SIDE];
        (0..maps[0].len())
            .map(|i| {
                for (b, m) in buf.iter_mut().zip(maps) {
                    *b = m.data()[i];
                }
                buf.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                buf.iter().fold(T::zero(), |acc, &v| acc + v)
            })
            .collect()
    };
    let mut data = side_sum(side_a);
    data.extend(side_sum(side_b));
    Tensor::from_vec(&[2 * shape[0], shape[1], shape[2]], data)
}

/// The twenty sampled frames of a plot, ten per row side.
#[derive(Debug, Clone)]
pub struct PlotImages {
    pub side_a: Vec<Image>,
    pub side_b: Vec<Image>,
}

/// Extracts all twenty maps (in parallel) and fuses them.
pub fn extract_and_fuse<T: Real, E: FeatureExtractor<T> + ?Sized>(
    extractor: &E,
    plot: &PlotImages,
) -> Result<Tensor<T>> {
    let maps = |imgs: &[Image]| -> Result<Vec<Tensor<T>>> {
        imgs.par_iter().map(|i| extractor.extract(i)).collect()
    };
    fuse(&maps(&plot.side_a)?, &maps(&plot.side_b)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressorConfig {
    /// Channels of the fused map (twice the extractor depth).
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub pool: usize,
    pub fc1: usize,
    pub fc2: usize,
}

impl RegressorConfig {
    /// Default head widths for a fused map of the given shape.
    pub fn for_input(in_channels: usize, height: usize, width: usize) -> Self {
        RegressorConfig {
            in_channels,
            height,
            width,
            conv_channels: 64,
            kernel: 3,
            pool: 2,
            fc1: 256,
            fc2: 64,
        }
    }

    fn conv_spec(&self) -> ConvSpec {
        ConvSpec {
            stride: 1,
            padding: self.kernel / 2,
        }
    }

    fn pooled_dims(&self) -> Result<(usize, usize)> {
        let pad = 2 * (self.kernel / 2);
        let (ch, cw) = (
            self.height + pad + 1 - self.kernel,
            self.width + pad + 1 - self.kernel,
        );
        if self.pool == 0 || ch < self.pool || cw < self.pool {
            return Err(Error::Shape(format!(
                "{}x{} fused map too small for a {} pool",
                self.height, self.width, self.pool
            )));
        }
        Ok((
            (ch - self.pool) / self.pool + 1,
            (cw - self.pool) / self.pool + 1,
        ))
    }

    pub fn flat_features(&self) -> Result<usize> {
        let (h, w) = self.pooled_dims()?;
        Ok(self.conv_channels * h * w)
    }

    fn to_tensor<T: Real>(self) -> Tensor<T> {
        let v = [
            self.in_channels,
            self.height,
            self.width,
            self.conv_channels,
            self.kernel,
            self.pool,
            self.fc1,
            self.fc2,
        ];
        Tensor::from_vec(&[8], v.iter().map(|&x| T::of(x as f64)).collect()).unwrap()
    }

    fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let v: Vec<usize> = t
            .data()
            .iter()
            .map(|x| x.as_f64().round() as usize)
            .collect();
        let [in_channels, height, width, conv_channels, kernel, pool, fc1, fc2] = v[..] else {
            return Err(Error::Shape(
                "regressor config record must hold 8 values".into(),
            ));
        };
        Ok(RegressorConfig {
            in_channels,
            height,
            width,
            conv_channels,
            kernel,
            pool,
            fc1,
            fc2,
        })
    }
}

const PARAM_NAMES: [&str; 8] = [
    "conv.weight",
    "conv.bias",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
    "fc3.weight",
    "fc3.bias",
];

/// The trainable regression head.
#[derive(Debug, Clone, PartialEq)]
pub struct YieldRegressor<T = f64> {
    pub config: RegressorConfig,
    /// In [`PARAM_NAMES`] order.
    params: Vec<Tensor<T>>,
}

impl<T: Real> YieldRegressor<T> {
    /// He-uniform weights from `seed`, zero biases.
    pub fn new(config: RegressorConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = config.flat_features()?;
        let k = config.kernel;
        let conv_fan = config.in_channels * k * k;
        let params = vec![
            he_uniform(
                &[config.conv_channels, config.in_channels, k, k],
                conv_fan,
                &mut rng,
            ),
            Tensor::zeros(&[config.conv_channels]),
            he_uniform(&[config.fc1, flat], flat, &mut rng),
            Tensor::zeros(&[config.fc1]),
            he_uniform(&[config.fc2, config.fc1], config.fc1, &mut rng),
            Tensor::zeros(&[config.fc2]),
            he_uniform(&[1, config.fc2], config.fc2, &mut rng),
            Tensor::zeros(&[1]),
        ];
        Ok(YieldRegressor { config, params })
    }

    pub fn from_parameters(config: RegressorConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        let template = Self::new(config, 0)?;
        if params.len() != template.params.len()
            || params
                .iter()
                .zip(&template.params)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Shape(
                "regressor parameters do not match the configuration".into(),
            ));
        }
        Ok(YieldRegressor { config, params })
    }

    pub fn parameters(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn parameter_names() -> &'static [&'static str] {
        &PARAM_NAMES
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        match *x.shape() {
            [_, ch, h, w] if ch == c.in_channels && h == c.height && w == c.width => Ok(()),
            _ => Err(Error::Shape(format!(
                "regressor expects [N, {}, {}, {}], got {:?}",
                c.in_channels,
                c.height,
                c.width,
                x.shape()
            ))),
        }
    }

    /// Records the head on `tape`; returns the `[N, 1]` output and the
    /// parameter leaves.
    pub fn forward_on(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Vec<Var>)> {
        self.check_input(tape.value(x)?)?;
        let p: Vec<Var> = self.params.iter().map(|t| tape.leaf(t.clone())).collect();
        let h = tape.conv2d(x, p[0], p[1], self.config.conv_spec())?;
        let h = tape.relu(h)?;
        let h = tape.maxpool2d(h, self.config.pool, self.config.pool)?;
        let h = tape.flatten(h)?;
        let h = tape.linear(h, p[2], p[3])?;
        let h = tape.relu(h)?;
        let h = tape.linear(h, p[4], p[5])?;
        let h = tape.relu(h)?;
        let out = tape.linear(h, p[6], p[7])?;
        Ok((out, p))
    }

    /// Raw head output for a batch `[N, 2C, H, W]`; shape `[N, 1]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let p = &self.params;
        let h = ops::relu(&ops::conv2d(x, &p[0], &p[1], self.config.conv_spec())?);
        let (h, _) = ops::maxpool2d(&h, self.config.pool, self.config.pool)?;
        let n = h.shape()[0];
        let h = h.reshape(&[n, h.len() / n])?;
        let h = ops::relu(&ops::linear(&h, &p[2], &p[3])?);
        let h = ops::relu(&ops::linear(&h, &p[4], &p[5])?);
        ops::linear(&h, &p[6], &p[7])
    }

    /// Yield for one fused map, clamped at 0.
    pub fn predict_fused(&self, fused: &Tensor<T>) -> Result<f64> {
        let s = fused.shape().to_vec();
        let mut batch_shape = vec![1];
        batch_shape.extend(s);
        let out = self.forward(&fused.reshape(&batch_shape)?)?;
        Ok(out.item().as_f64().max(0.0))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let cfg = self.config.to_tensor::<T>();
        let mut named: Vec<(&str, &Tensor<T>)> = vec![("config", &cfg)];
        named.extend(PARAM_NAMES.iter().copied().zip(self.params.iter()));
        save_checkpoint(path, &named)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut entries = load_checkpoint::<T>(path)?;
        let bad = |m: &str| Error::Format {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        if entries.len() != 9 || entries[0].0 != "config" {
            return Err(bad(
                "expected a config record followed by 8 regressor tensors",
            ));
        }
        let config = RegressorConfig::from_tensor(&entries[0].1)?;
        let params: Vec<Tensor<T>> = entries
            .drain(1..)
            .zip(PARAM_NAMES)
            .map(|((name, t), want)| {
                if name == want {
                    Ok(t)
                } else {
                    Err(bad(&format!("found {name}, expected {want}")))
                }
            })
            .collect::<Result<_>>()?;
        Self::from_parameters(config, params)
    }
}

/// Yield (t/ha, clamped at 0) of one plot from its twenty sampled frames.
pub fn predict_yield<T: Real, E: FeatureExtractor<T> + ?Sized>(
    plot: &PlotImages,
    extractor: &E,
    regressor: &YieldRegressor<T>,
) -> Result<f64> {
    regressor.predict_fused(&extract_and_fuse(extractor, plot)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput<T = f64> {
    pub regressor: YieldRegressor<T>,
    /// Mean per-plot squared error over each epoch, measured before each step.
    pub loss_history: Vec<f64>,
}

/// Mean squared error of `regressor` over `(fused map, target)` pairs.
pub fn evaluate_mse<T: Real>(
    regressor: &YieldRegressor<T>,
    data: &[(Tensor<T>, f64)],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    let mut sum = 0.0;
    for (x, y) in data {
        let s = x.shape().to_vec();
        let mut bs = vec![1];
        bs.extend(s);
        let out = regressor.forward(&x.reshape(&bs)?)?.item().as_f64();
        sum += (out - y).powi(2);
    }
    Ok(sum / data.len() as f64)
}

/// Adam/MSE training of the head on pre-fused feature maps.
pub fn train_on_fused<T: Real>(
    initial: YieldRegressor<T>,
    data: &[(Tensor<T>, f64)],
    cfg: &TrainConfig,
) -> Result<TrainOutput<T>> {
    if data.is_empty() {
        return Err(Error::InvalidInput(
            "cannot train on an empty dataset".into(),
        ));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let mut reg = initial;
    let mut adam = AdamState::new(cfg.adam, reg.parameters());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&Tensor<T>> = batch.iter().map(|&i| &data[i].0).collect();
            let x = Tensor::stack(&xs)?;
            let y = Tensor::from_vec(
                &[batch.len(), 1],
                batch.iter().map(|&i| T::of(data[i].1)).collect(),
            )?;
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let yv = tape.leaf(y);
            let (out, pv) = reg.forward_on(&mut tape, xv)?;
            let loss = tape.mse(out, yv)?;
            epoch_sum += tape.value(loss)?.item().as_f64() * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor<T>> = pv
                .iter()
                .zip(reg.parameters())
                .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
                .collect::<Result<_>>()?;
            adam_step(reg.parameters_mut(), &g, &mut adam)?;
        }
        history.push(epoch_sum / data.len() as f64);
    }
    Ok(TrainOutput {
        regressor: reg,
        loss_history: history,
    })
}

/// Extracts and fuses each plot's frames, then trains a freshly initialised
/// head (seeded by `init_seed`) on the resulting maps.
pub fn train_yield<T: Real, E: FeatureExtractor<T> + ?Sized>(
    extractor: &E,
    dataset: &[(PlotImages, f64)],
    init_seed: u64,
    cfg: &TrainConfig,
) -> Result<TrainOutput<T>> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput(
            "cannot train on an empty dataset".into(),
        ));
    }
    let fused: Vec<(Tensor<T>, f64)> = dataset
        .iter()
        .map(|(p, y)| Ok((extract_and_fuse(extractor, p)?, *y)))
        .collect::<Result<_>>()?;
    let [c, h, w] = *fused[0].0.shape() else {
        unreachable!("fuse returns 3-D maps")
    };
    let reg = YieldRegressor::new(RegressorConfig::for_input(c, h, w), init_seed)?;
    train_on_fused(reg, &fused, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: f64) -> Tensor<f64> {
        Tensor::full(&[2, 3, 3], v)
    }

    #[test]
    fn fuse_zero_and_linear() {
        let zeros = vec![map(0.0); 10];
        let f = fuse(&zeros, &zeros).unwrap();
        assert_eq!(f.shape(), &[4, 3, 3]);
        assert!(f.data().iter().all(|&v| v == 0.0));

        let m =
            Tensor::from_vec(&[2, 3, 3], (0..18).map(|i| i as f64 * 0.37 - 2.0).collect()).unwrap();
        let f = fuse(&vec![m.clone(); 10], &zeros).unwrap();
        for (i, v) in f.data().iter().enumerate() {
            let want = if i < 18 { 10.0 * m.data()[i] } else { 0.0 };
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_rejects_bad_groups() {
        assert!(fuse(&vec![map(0.0); 9], &vec![map(0.0); 10]).is_err());
        let mut odd = vec![map(0.0); 10];
        odd[3] = Tensor::zeros(&[2, 3, 4]);
        assert!(fuse(&odd, &vec![map(0.0); 10]).is_err());
    }

    #[test]
    fn extractor_output_shape() {
        let ex = ReferenceExtractor::<f64>::new(32, 1);
        let img = Image::filled(20, 13, 3, 0.5).unwrap();
        let f = ex.extract(&img).unwrap();
        assert_eq!(f.shape(), &[32, 2, 3]);
        assert_eq!(ex.output_dims(13, 20), (2, 3));
        assert!(ex.extract(&Image::new(8, 8, 1).unwrap()).is_err());
    }

    #[test]
    fn zero_biases_and_zero_images_give_zero() {
        let ex = ReferenceExtractor::<f64>::new(4, 3);
        let img = Image::new(16, 16, 3).unwrap();
        let plot = PlotImages {
            side_a: vec![img.clone(); 10],
            side_b: vec![img; 10],
        };
        let reg = YieldRegressor::new(RegressorConfig::for_input(8, 2, 2), 9).unwrap();
        assert_eq!(predict_yield(&plot, &ex, &reg).unwrap(), 0.0);
    }

    #[test]
    fn checkpoint_reload() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RegressorConfig {
            conv_channels: 4,
            fc1: 8,
            fc2: 4,
            ..RegressorConfig::for_input(6, 4, 4)
        };
        let reg = YieldRegressor::<f64>::new(cfg, 5).unwrap();
        let p = dir.path().join("m.ywts");
        reg.save(&p).unwrap();
        let back = YieldRegressor::<f64>::load(&p).unwrap();
        assert_eq!(back.config, cfg);
        for (a, b) in back.parameters().iter().zip(reg.parameters()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn feature_map_files() {
        let dir = tempfile::tempdir().unwrap();
        let m =
            Tensor::<f64>::from_vec(&[3, 2, 4], (0..24).map(|i| i as f64 / 4.0).collect()).unwrap();
        let p = dir.path().join("f.fimg");
        save_feature_map(&p, &m).unwrap();
        assert_eq!(load_feature_map::<f64>(&p).unwrap(), m);
    }

    #[test]
    fn empty_training_set() {
        let reg = YieldRegressor::<f64>::new(RegressorConfig::for_input(2, 2, 2), 0).unwrap();
        assert!(train_on_fused(reg, &[], &TrainConfig::default()).is_err());
    }
}
