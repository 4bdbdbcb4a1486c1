//! Fixed feature extractor for the perceptual term.
//!
//! Two flavours share one forward pass: a seeded random-weight VGG-style net
//! (hermetic, the default for training at desk scale) and the first three
//! blocks of torchvision's VGG16 loaded from a safetensors export of
//! `features.*`. Features are the activations after each block's max-pool.

use std::path::Path;

use autograd::{Activation, ConvGeometry, Float, Graph, Tensor, Var};
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::nn::{Conv2d, ParamStore};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerceptualSpec {
    /// Random He-initialised blocks `(width, convs)`.
    Random {
        blocks: Vec<(usize, usize)>,
        seed: u64,
    },
    /// VGG16 `features.{0,2,5,7,10,12,14}` from a safetensors file.
    Vgg16 { weights: String },
    /// φ = id, a single layer. Useful for checking the loss arithmetic.
    Identity,
}

impl Default for PerceptualSpec {
    fn default() -> Self {
        PerceptualSpec::Random {
            blocks: vec![(16, 2), (32, 2), (64, 2)],
            seed: 0,
        }
    }
}

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq)]
enum InputMap {
    Center,
    ImageNet,
    None,
}

#[derive(Debug, Clone)]
pub struct PerceptualExtractor<T> {
    params: ParamStore<T>,
    blocks: Vec<Vec<Conv2d>>,
    weights: Vec<f64>,
    input: InputMap,
}

impl<T: Float> PerceptualExtractor<T> {
    pub fn from_spec(spec: &PerceptualSpec) -> Result<Self> {
        match spec {
            PerceptualSpec::Random { blocks, seed } => Self::random(blocks, *seed),
            PerceptualSpec::Vgg16 { weights } => Self::vgg16(Path::new(weights)),
            PerceptualSpec::Identity => Ok(Self::identity()),
        }
    }

    pub fn identity() -> Self {
        Self {
            params: ParamStore::new(),
            blocks: vec![],
            weights: vec![1.0],
            input: InputMap::None,
        }
    }

    pub fn random(blocks: &[(usize, usize)], seed: u64) -> Result<Self> {
        if blocks.is_empty() || blocks.iter().any(|&(w, n)| w == 0 || n == 0) {
            return Err(Error::Config(format!(
                "invalid perceptual blocks {blocks:?}"
            )));
        }
        let mut rng = seed::rng(&[seed, 0x7E2]);
        let mut params = ParamStore::new();
        let layers = build(&mut params, blocks, |store, name, cin, cout| {
            Conv2d::new(
                store,
                name,
                cin,
                cout,
                ConvGeometry::same(3, 1, 1),
                2f64.sqrt(),
                &mut rng,
            )
        });
        Ok(Self {
            params,
            weights: vec![1.0 / blocks.len() as f64; blocks.len()],
            blocks: layers,
            input: InputMap::Center,
        })
    }

    /// Loads the first three VGG16 blocks.
    pub fn vgg16(path: &Path) -> Result<Self> {
        const KEYS: [usize; 7] = [0, 2, 5, 7, 10, 12, 14];
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let file = SafeTensors::deserialize(&bytes).map_err(|e| {
            Error::Config(format!("{}: not a safetensors file: {e}", path.display()))
        })?;
        let spec = [(64, 2), (128, 2), (256, 3)];
        let mut params = ParamStore::new();
        let mut rng = seed::rng(&[0]);
        let layers = build(&mut params, &spec, |store, name, cin, cout| {
            Conv2d::new(
                store,
                name,
                cin,
                cout,
                ConvGeometry::same(3, 1, 1),
                1.0,
                &mut rng,
            )
        });
        let mut named = Vec::new();
        for (i, key) in KEYS.iter().enumerate() {
            for part in ["weight", "bias"] {
                let name = format!("features.{key}.{part}");
                let view = file.tensor(&name).map_err(|e| {
                    Error::Config(format!("{}: missing tensor {name}: {e}", path.display()))
                })?;
                if view.dtype() != Dtype::F32 {
                    return Err(Error::Config(format!(
                        "{name}: expected F32, got {:?}",
                        view.dtype()
                    )));
                }
                let data = view
                    .data()
                    .chunks_exact(4)
                    .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                    .collect();
                named.push((
                    params.names()[2 * i + (part == "bias") as usize].clone(),
                    Tensor::from_vec(view.shape(), data)?,
                ));
            }
        }
        params.load(named)?;
        Ok(Self {
            params,
            weights: vec![1.0 / 3.0; 3],
            blocks: layers,
            input: InputMap::ImageNet,
        })
    }

    pub fn layer_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Feature maps of `image` (N×3×H×W in [0,1]); φ's weights enter as constants.
    pub fn features(&self, g: &Graph<T>, image: Var) -> Result<Vec<Var>> {
        if self.blocks.is_empty() {
            return Ok(vec![image]);
        }
        let params = self.params.bind(g, false);
        let mut x = match self.input {
            InputMap::Center => g.affine(image, T::lit(2.0), T::lit(-1.0)),
            InputMap::ImageNet => imagenet_normalize(g, image)?,
            InputMap::None => image,
        };
        let mut out = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            for conv in block {
                let y = conv.forward(g, &params, x)?;
                x = g.activation(y, Activation::Relu);
            }
            x = g.max_pool2(x)?;
            out.push(x);
        }
        Ok(out)
    }
}

fn build<T: Float>(
    store: &mut ParamStore<T>,
    blocks: &[(usize, usize)],
    mut conv: impl FnMut(&mut ParamStore<T>, &str, usize, usize) -> Conv2d,
) -> Vec<Vec<Conv2d>> {
    let mut cin = 3;
    let mut layers = Vec::new();
    for (b, &(width, n)) in blocks.iter().enumerate() {
        let mut block = Vec::new();
        for i in 0..n {
            block.push(conv(
                store,
                &format!("phi.block{}.conv{}", b + 1, i + 1),
                cin,
                width,
            ));
            cin = width;
        }
        layers.push(block);
    }
    layers
}

fn imagenet_normalize<T: Float>(g: &Graph<T>, image: Var) -> Result<Var> {
    let (n, c, h, w) = g.value(image).dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!(
            "ImageNet normalisation needs 3 channels, got {c}"
        )));
    }
    let plane = h * w;
    let channel = move |i: usize| (i / plane) % 3;
    let out = {
        let v = g.value(image);
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let ch = channel(i);
                (x - T::lit(IMAGENET_MEAN[ch])) / T::lit(IMAGENET_STD[ch])
            })
            .collect();
        Tensor::from_vec(&[n, c, h, w], data)?
    };
    Ok(g.custom(&[image], out, move |args| {
        let data = args
            .grad
            .data()
            .iter()
            .enumerate()
            .map(|(i, &gr)| gr / T::lit(IMAGENET_STD[channel(i)]))
            .collect();
        vec![Some(
            Tensor::from_vec(args.grad.shape(), data).expect("same shape"),
        )]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn image(seed: u64) -> Tensor<f64> {
        let mut rng = seed::rng(&[seed]);
        Tensor::from_vec(&[1, 3, 16, 16], (0..768).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn random_features_are_pooled_stages() {
        let phi = PerceptualExtractor::<f64>::from_spec(&PerceptualSpec::default()).unwrap();
        let g = Graph::new();
        let x = g.constant(image(1));
        let f = phi.features(&g, x).unwrap();
        let shapes: Vec<_> = f.iter().map(|&v| g.shape(v)).collect();
        assert_eq!(
            shapes,
            vec![vec![1, 16, 8, 8], vec![1, 32, 4, 4], vec![1, 64, 2, 2]]
        );
        assert_eq!(phi.layer_weights(), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn extractor_is_seeded() {
        let spec = PerceptualSpec::default();
        let a = PerceptualExtractor::<f32>::from_spec(&spec).unwrap();
        let b = PerceptualExtractor::<f32>::from_spec(&spec).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn vgg_loader_reads_safetensors_export() {
        use safetensors::tensor::TensorView;
        let shapes = [
            (64, 3),
            (64, 64),
            (128, 64),
            (128, 128),
            (256, 128),
            (256, 256),
            (256, 256),
        ];
        let mut buffers = Vec::new();
        for (i, &(o, c)) in [0, 2, 5, 7, 10, 12, 14].iter().zip(&shapes) {
            let w: Vec<u8> = (0..o * c * 9)
                .flat_map(|k| ((k % 7) as f32 * 0.01).to_le_bytes())
                .collect();
            let b: Vec<u8> = (0..o).flat_map(|_| 0.5f32.to_le_bytes()).collect();
            buffers.push((format!("features.{i}.weight"), vec![o, c, 3, 3], w));
            buffers.push((format!("features.{i}.bias"), vec![o], b));
        }
        let views: Vec<_> = buffers
            .iter()
            .map(|(n, s, d)| {
                (
                    n.clone(),
                    TensorView::new(Dtype::F32, s.clone(), d).unwrap(),
                )
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.safetensors");
        safetensors::serialize_to_file(views, &None, &path).unwrap();

        let phi = PerceptualExtractor::<f32>::vgg16(&path).unwrap();
        assert_eq!(phi.params.num_scalars(), 1_735_488);
        let b = phi
            .params
            .get(phi.params.index_of("phi.block3.conv3.bias").unwrap());
        assert!(b.data().iter().all(|&v| v == 0.5));

        let missing = dir.path().join("bad.safetensors");
        safetensors::serialize_to_file(views_without_last(&buffers), &None, &missing).unwrap();
        assert!(PerceptualExtractor::<f32>::vgg16(&missing).is_err());
    }

    fn views_without_last(
        buffers: &[(String, Vec<usize>, Vec<u8>)],
    ) -> Vec<(String, safetensors::tensor::TensorView<'_>)> {
        buffers[..buffers.len() - 1]
            .iter()
            .map(|(n, s, d)| {
                (
                    n.clone(),
                    safetensors::tensor::TensorView::new(Dtype::F32, s.clone(), d).unwrap(),
                )
            })
            .collect()
    }
}
