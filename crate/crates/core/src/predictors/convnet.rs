//! Miniature forward-only 3D convolutional localizer with inference-time
//! dropout.
//!
//! The network is a plain stack of same-padded `k×k×k` convolutions, ReLU on
//! hidden layers and a sigmoid on the single-channel output. Dropout
//! (inverted, rate `p`) follows the hidden layers listed in
//! `dropout_layers` and is active only on stochastic passes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Localizer;
use crate::error::{Error, Result};
use crate::seed;
use crate::volume::{Point3, Volume3};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    Seeded(u64),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvNetSpec {
    /// Output channels per layer; the last entry must be 1.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub dropout_rate: f64,
    /// Hidden-layer indices followed by dropout; `None` selects [`deepest_half`].
    pub dropout_layers: Option<Vec<usize>>,
    pub weights: WeightSource,
}

impl Default for ConvNetSpec {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 16, 8, 1],
            kernel: 3,
            dropout_rate: 0.5,
            dropout_layers: None,
            weights: WeightSource::Seeded(0),
        }
    }
}

/// The middle `ceil(h/2)` of `h` hidden layers: the deepest half of an
/// encoder-decoder shaped stack.
pub fn deepest_half(hidden: usize) -> Vec<usize> {
    if hidden == 0 {
        return Vec::new();
    }
    let n = hidden.div_ceil(2);
    let start = (hidden - n) / 2;
    (start..start + n).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl LayerShape {
    fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.pow(3)
    }
}

/// JSON manifest accompanying a raw `f32` weight payload. Per layer the
/// payload holds weights in `[out][in][z][y][x]` order followed by biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub layers: Vec<LayerShape>,
    pub dtype: String,
}

#[derive(Debug, Clone)]
struct ConvLayer {
    shape: LayerShape,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ConvNet {
    spec: ConvNetSpec,
    layers: Vec<ConvLayer>,
    dropout: Vec<bool>,
}

impl ConvNetSpec {
    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut in_ch = 1;
        self.channels
            .iter()
            .map(|&out| {
                let s = LayerShape {
                    in_channels: in_ch,
                    out_channels: out,
                    kernel: self.kernel,
                };
                in_ch = out;
                s
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::InvalidModel("channel counts must be positive".into()));
        }
        if *self.channels.last().unwrap() != 1 {
            return Err(Error::InvalidModel("the output layer must have one channel".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidModel(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidModel(format!(
                "dropout rate must lie in [0,1), got {}",
                self.dropout_rate
            )));
        }
        let hidden = self.channels.len() - 1;
        if let Some(layers) = &self.dropout_layers {
            if let Some(bad) = layers.iter().find(|&&l| l >= hidden) {
                return Err(Error::InvalidModel(format!("dropout layer {bad} is not a hidden layer")));
            }
        }
        Ok(())
    }
}

impl ConvNet {
    pub fn new(spec: ConvNetSpec) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        let layers = match &spec.weights {
            WeightSource::Seeded(s) => seeded_layers(&shapes, *s),
            WeightSource::File(path) => load_layers(&shapes, path)?,
        };
        let hidden = shapes.len() - 1;
        let chosen = spec.dropout_layers.clone().unwrap_or_else(|| deepest_half(hidden));
        let dropout = (0..hidden).map(|i| chosen.contains(&i)).collect();
        Ok(Self { spec, layers, dropout })
    }

    pub fn spec(&self) -> &ConvNetSpec {
        &self.spec
    }

    /// Hidden-layer indices followed by dropout.
    pub fn dropout_layers(&self) -> Vec<usize> {
        self.dropout
            .iter()
            .enumerate()
            .filter_map(|(i, &d)| d.then_some(i))
            .collect()
    }

    /// Writes `<stem>.json` (manifest) and `<stem>.raw` (payload).
    pub fn save_weights(&self, stem: &Path) -> Result<()> {
        let manifest = WeightManifest {
            layers: self.layers.iter().map(|l| l.shape).collect(),
            dtype: "f32".into(),
        };
        let (json, raw) = (stem.with_extension("json"), stem.with_extension("raw"));
        fs::write(&json, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&json, e))?;
        let mut bytes = Vec::new();
        for l in &self.layers {
            for &w in l.weights.iter().chain(&l.bias) {
                bytes.extend_from_slice(&w.to_le_bytes());
            }
        }
        fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
    }

    pub fn forward(&self, v: &Volume3, stochastic: bool, seed: u64) -> Result<Volume3> {
        if v.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidData("network input must be finite".into()));
        }
        let dims = v.dims();
        let mut act: Vec<f32> = v.data().iter().map(|&x| x as f32).collect();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            act = conv3d_same(&act, dims, layer);
            if li == last {
                for x in &mut act {
                    *x = 1.0 / (1.0 + (-*x).exp());
                }
            } else {
                for x in &mut act {
                    *x = x.max(0.0);
                }
                if stochastic && self.dropout[li] {
                    let mut rng = seed::rng_for(seed, li as u64);
                    inverted_dropout(&mut act, self.spec.dropout_rate, &mut rng);
                }
            }
        }
        v.with_data(act.into_iter().map(f64::from).collect())
    }
}

/// Zeroes each value with probability `rate` and scales survivors by
/// `1 / (1 - rate)`.
pub fn inverted_dropout<R: Rng>(values: &mut [f32], rate: f64, rng: &mut R) {
    if rate <= 0.0 {
        return;
    }
    let scale = (1.0 / (1.0 - rate)) as f32;
    for x in values {
        if rng.random::<f64>() < rate {
            *x = 0.0;
        } else {
            *x *= scale;
        }
    }
}

fn seeded_layers(shapes: &[LayerShape], s: u64) -> Vec<ConvLayer> {
    let mut rng = seed::rng(s);
    shapes
        .iter()
        .map(|&shape| {
            let k3 = shape.kernel.pow(3);
            let fan = (shape.in_channels * k3 + shape.out_channels * k3) as f64;
            let a = (6.0 / fan).sqrt();
            let weights = (0..shape.weight_count())
                .map(|_| rng.random_range(-a..a) as f32)
                .collect();
            ConvLayer {
                shape,
                weights,
                bias: vec![0.0; shape.out_channels],
            }
        })
        .collect()
}

fn load_layers(shapes: &[LayerShape], stem: &Path) -> Result<Vec<ConvLayer>> {
    let (json, raw) = (stem.with_extension("json"), stem.with_extension("raw"));
    let text = fs::read(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: WeightManifest = serde_json::from_slice(&text)?;
    if manifest.dtype != "f32" {
        return Err(Error::InvalidModel(format!("unsupported weight dtype {:?}", manifest.dtype)));
    }
    if manifest.layers != shapes {
        return Err(Error::InvalidModel(format!(
            "weight file layers {:?} do not match spec {:?}",
            manifest.layers, shapes
        )));
    }
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected: usize = shapes.iter().map(|s| s.weight_count() + s.out_channels).sum();
    if bytes.len() != expected * 4 {
        return Err(Error::InvalidModel(format!(
            "weight payload has {} bytes, expected {}",
            bytes.len(),
            expected * 4
        )));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    Ok(shapes
        .iter()
        .map(|&shape| ConvLayer {
            shape,
            weights: values.by_ref().take(shape.weight_count()).collect(),
            bias: values.by_ref().take(shape.out_channels).collect(),
        })
        .collect())
}

/// Zero-padded convolution; `input` holds `in_channels` stacked volumes.
fn conv3d_same(input: &[f32], dims: [usize; 3], layer: &ConvLayer) -> Vec<f32> {
    let [nx, ny, nz] = dims;
    let vox = nx * ny * nz;
    let LayerShape {
        in_channels,
        out_channels,
        kernel,
    } = layer.shape;
    let half = (kernel / 2) as isize;
    let k3 = kernel.pow(3);
    let mut out = vec![0.0f32; out_channels * vox];
    out.par_chunks_mut(vox).enumerate().for_each(|(oc, dst)| {
        dst.fill(layer.bias[oc]);
        for ic in 0..in_channels {
            let src = &input[ic * vox..(ic + 1) * vox];
            let w = &layer.weights[(oc * in_channels + ic) * k3..(oc * in_channels + ic + 1) * k3];
            for (t, &wt) in w.iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                let dx = (t % kernel) as isize - half;
                let dy = ((t / kernel) % kernel) as isize - half;
                let dz = (t / (kernel * kernel)) as isize - half;
                let x0 = (-dx).max(0) as usize;
                let x1 = (nx as isize - dx).min(nx as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for z in 0..nz {
                    let sz = z as isize + dz;
                    if sz < 0 || sz >= nz as isize {
                        continue;
                    }
                    for y in 0..ny {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= ny as isize {
                            continue;
                        }
                        let drow = nx * (y + ny * z);
                        let srow = nx * (sy as usize + ny * sz as usize);
                        let d = &mut dst[drow + x0..drow + x1];
                        let s = &src[(srow as isize + x0 as isize + dx) as usize..(srow as isize + x1 as isize + dx) as usize];
                        for (a, &b) in d.iter_mut().zip(s) {
                            *a += wt * b;
                        }
                    }
                }
            }
        }
    });
    out
}

impl Localizer for ConvNet {
    fn predict(&self, input: &Volume3, _truth_hint: Option<Point3>, stochastic: bool, seed: u64) -> Result<Volume3> {
        self.forward(input, stochastic, seed)
    }

    fn name(&self) -> &'static str {
        "convnet"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ConvNetSpec {
        ConvNetSpec {
            channels: vec![4, 6, 6, 4, 1],
            weights: WeightSource::Seeded(17),
            ..Default::default()
        }
    }

    fn input(dims: [usize; 3]) -> Volume3 {
        Volume3::from_fn(dims, [1.0; 3], |i, j, k| ((i * 7 + j * 3 + k * 5) % 13) as f64 / 13.0).unwrap()
    }

    /// Direct zero-padded convolution, one output voxel at a time.
    fn conv_oracle(input: &[f32], dims: [usize; 3], layer: &ConvLayer) -> Vec<f32> {
        let [nx, ny, nz] = dims;
        let k = layer.shape.kernel as isize;
        let h = k / 2;
        let vox = nx * ny * nz;
        let mut out = vec![0.0f32; layer.shape.out_channels * vox];
        for oc in 0..layer.shape.out_channels {
            for z in 0..nz as isize {
                for y in 0..ny as isize {
                    for x in 0..nx as isize {
                        let mut acc = layer.bias[oc] as f64;
                        for ic in 0..layer.shape.in_channels {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let (sx, sy, sz) = (x + kx - h, y + ky - h, z + kz - h);
                                        if sx < 0 || sy < 0 || sz < 0 || sx >= nx as isize || sy >= ny as isize || sz >= nz as isize {
                                            continue;
                                        }
                                        let widx = (((oc * layer.shape.in_channels + ic) as isize * k + kz) * k + ky) * k + kx;
                                        let sidx = ic * vox + (sx + nx as isize * (sy + ny as isize * sz)) as usize;
                                        acc += layer.weights[widx as usize] as f64 * input[sidx] as f64;
                                    }
                                }
                            }
                        }
                        out[oc * vox + (x + nx as isize * (y + ny as isize * z)) as usize] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let dims = [6, 5, 4];
        let layer = &seeded_layers(&[LayerShape { in_channels: 2, out_channels: 3, kernel: 3 }], 3)[0];
        let mut rng = seed::rng(8);
        let x: Vec<f32> = (0..2 * 120).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = conv3d_same(&x, dims, layer);
        let slow = conv_oracle(&x, dims, layer);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn deepest_half_placement() {
        assert_eq!(deepest_half(4), vec![1, 2]);
        assert_eq!(deepest_half(6), vec![1, 2, 3]);
        assert_eq!(deepest_half(3), vec![0, 1]);
        assert_eq!(deepest_half(1), vec![0]);
        let net = ConvNet::new(ConvNetSpec::default()).unwrap();
        assert_eq!(net.dropout_layers(), vec![1, 2]);
    }

    #[test]
    fn output_shape_and_range() {
        let net = ConvNet::new(small()).unwrap();
        for dims in [[3, 3, 3], [9, 7, 5]] {
            let out = net.forward(&input(dims), true, 1).unwrap();
            assert_eq!(out.dims(), dims);
            assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn determinism_and_seed_sensitivity() {
        let net = ConvNet::new(small()).unwrap();
        let v = input([10, 10, 10]);
        assert_eq!(net.forward(&v, false, 0).unwrap(), net.forward(&v, false, 0).unwrap());
        assert_eq!(net.forward(&v, true, 5).unwrap(), net.forward(&v, true, 5).unwrap());
        for s in 0..10u64 {
            let a = net.forward(&v, true, 2 * s).unwrap();
            let b = net.forward(&v, true, 2 * s + 1).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() > 0.0, "seed pair {s}");
        }
        let det = net.forward(&v, false, 0).unwrap();
        assert!(det.max_abs_diff(&net.forward(&v, true, 0).unwrap()).unwrap() > 0.0);
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let a = 0.73f32;
        let draws = 10_000;
        let mut vals = vec![a; draws];
        let mut rng = seed::rng(99);
        inverted_dropout(&mut vals, 0.5, &mut rng);
        assert!(vals.iter().all(|&x| x == 0.0 || x == 2.0 * a));
        let mean = vals.iter().map(|&x| x as f64).sum::<f64>() / draws as f64;
        assert!((mean - a as f64).abs() <= 0.03 * a as f64, "mean {mean}");
    }

    #[test]
    fn weight_file_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("weights");
        let net = ConvNet::new(small()).unwrap();
        net.save_weights(&stem).unwrap();

        let loaded = ConvNet::new(ConvNetSpec {
            weights: WeightSource::File(stem.clone()),
            ..small()
        })
        .unwrap();
        let v = input([8, 8, 8]);
        assert_eq!(loaded.forward(&v, true, 3).unwrap(), net.forward(&v, true, 3).unwrap());

        let wrong = ConvNetSpec {
            channels: vec![4, 6, 1],
            weights: WeightSource::File(stem.clone()),
            ..Default::default()
        };
        assert!(matches!(ConvNet::new(wrong), Err(Error::InvalidModel(_))));

        let raw = stem.with_extension("raw");
        let mut bytes = fs::read(&raw).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&raw, bytes).unwrap();
        let truncated = ConvNetSpec {
            weights: WeightSource::File(stem),
            ..small()
        };
        assert!(matches!(ConvNet::new(truncated), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn invalid_specs() {
        let bad = ConvNetSpec { channels: vec![4, 2], ..Default::default() };
        assert!(ConvNet::new(bad).is_err());
        let bad = ConvNetSpec { dropout_layers: Some(vec![4]), ..Default::default() };
        assert!(ConvNet::new(bad).is_err());
        let bad = ConvNetSpec { kernel: 2, ..Default::default() };
        assert!(ConvNet::new(bad).is_err());
    }
}
