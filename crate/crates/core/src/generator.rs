//! Mask-free two-branch reconstruction network.
//!
//! Both branches share one topology (gated-conv encoder, dilated bottleneck,
//! upsampling decoder) but own separate parameters: the inpainting branch
//! emits a C-channel image, the mask branch a 1-channel soft mask. The output
//! is `mask ⊙ inpainted + (1 − mask) ⊙ input`.

use autograd::{blend, Activation, ConvGeometry, Float, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::nn::{Conv2d, GatedConv2d, ParamStore};
use crate::{seed, Error, Image, Mask, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branches {
    /// Inpainting and mask branches, composed.
    Two,
    /// Inpainting branch only; the mask is identically one.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub channels: usize,
    /// Encoder widths after the first and second stride-2 stage.
    pub widths: (usize, usize),
    pub dilations: Vec<usize>,
    pub branches: Branches,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            widths: (32, 64),
            dilations: vec![1, 2, 4, 2],
            branches: Branches::Two,
            seed: 0,
        }
    }
}

/// Total downsampling of the encoder.
pub const DOWNSAMPLING: usize = 4;

const ACT: Activation = Activation::Elu(1.0);

#[derive(Debug, Clone, PartialEq)]
struct Branch {
    encoder: Vec<GatedConv2d>,
    bottleneck: Vec<GatedConv2d>,
    decoder: Vec<GatedConv2d>,
    head: Conv2d,
}

impl Branch {
    fn new<T: Float>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &GeneratorConfig,
        out_channels: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let (w1, w2) = cfg.widths;
        let down = ConvGeometry::same(3, 2, 1);
        let flat = ConvGeometry::same(3, 1, 1);
        let encoder = vec![
            GatedConv2d::new(
                store,
                &format!("{prefix}.enc1"),
                cfg.channels,
                w1,
                down,
                ACT,
                rng,
            ),
            GatedConv2d::new(store, &format!("{prefix}.enc2"), w1, w2, down, ACT, rng),
        ];
        let bottleneck = cfg
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                GatedConv2d::new(
                    store,
                    &format!("{prefix}.mid{}", i + 1),
                    w2,
                    w2,
                    ConvGeometry::same(3, 1, d),
                    ACT,
                    rng,
                )
            })
            .collect();
        let w3 = (w1 / 2).max(1);
        let decoder = vec![
            GatedConv2d::new(store, &format!("{prefix}.dec1"), w2, w1, flat, ACT, rng),
            GatedConv2d::new(store, &format!("{prefix}.dec2"), w1, w3, flat, ACT, rng),
        ];
        let head = Conv2d::new(
            store,
            &format!("{prefix}.head"),
            w3,
            out_channels,
            flat,
            1.0,
            rng,
        );
        Self {
            encoder,
            bottleneck,
            decoder,
            head,
        }
    }

    /// Sigmoid-squashed output at input resolution.
    fn forward<T: Float>(&self, g: &Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for layer in self.encoder.iter().chain(&self.bottleneck) {
            h = layer.forward(g, params, h)?;
        }
        for layer in &self.decoder {
            h = g.upsample_nearest(h, 2)?;
            h = layer.forward(g, params, h)?;
        }
        let out = self.head.forward(g, params, h)?;
        Ok(g.sigmoid(out))
    }
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorVars {
    /// Raw inpainting branch output.
    pub inpainted: Var,
    /// Soft mask, N×1×H×W.
    pub mask: Var,
    /// Composed reconstruction.
    pub composed: Var,
}

/// Values of one forward pass on an N×C×H×W batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorOutput<T> {
    pub inpainted: Tensor<T>,
    pub mask: Tensor<T>,
    pub composed: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    config: GeneratorConfig,
    params: ParamStore<T>,
    inpaint: Branch,
    mask: Option<Branch>,
}

impl<T: Float> Generator<T> {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        if config.channels == 0 || config.widths.0 == 0 || config.widths.1 == 0 {
            return Err(Error::Config(
                "generator widths and channels must be positive".into(),
            ));
        }
        let mut params = ParamStore::new();
        let mut rng = seed::rng(&[config.seed, 0x6E6]);
        let inpaint = Branch::new(&mut params, "inpaint", &config, config.channels, &mut rng);
        let mask = match config.branches {
            Branches::Two => Some(Branch::new(&mut params, "mask", &config, 1, &mut rng)),
            Branches::Single => None,
        };
        Ok(Self {
            config,
            params,
            inpaint,
            mask,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Parameter indices of the inpainting branch (θ1) and mask branch (θ2).
    pub fn branch_param_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let names = self.params.names();
        let pick = |prefix: &str| {
            names
                .iter()
                .enumerate()
                .filter(|(_, n)| n.starts_with(prefix))
                .map(|(i, _)| i)
                .collect()
        };
        (pick("inpaint."), pick("mask."))
    }

    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || !h.is_multiple_of(DOWNSAMPLING) || !w.is_multiple_of(DOWNSAMPLING) {
            return Err(Error::Shape(format!(
                "generator input {h}x{w} must be a positive multiple of {DOWNSAMPLING} in both dimensions"
            )));
        }
        Ok(())
    }

    /// Records a forward pass of `input` (N×C×H×W in `[0, 1]`) on `g`.
    pub fn forward_graph(&self, g: &Graph<T>, params: &[Var], input: Var) -> Result<GeneratorVars> {
        let (_, c, h, w) = g.value(input).dims4()?;
        if c != self.config.channels {
            return Err(Error::Shape(format!(
                "generator expects {} channels, got {c}",
                self.config.channels
            )));
        }
        self.check_input_size(h, w)?;
        let centered = g.affine(input, T::lit(2.0), T::lit(-1.0));
        let inpainted = self.inpaint.forward(g, params, centered)?;
        let mask = match &self.mask {
            Some(branch) => branch.forward(g, params, centered)?,
            None => {
                let n = g.value(input).shape()[0];
                g.constant(Tensor::full(&[n, 1, h, w], T::one()))
            }
        };
        let composed = g.compose(mask, inpainted, input)?;
        Ok(GeneratorVars {
            inpainted,
            mask,
            composed,
        })
    }

    /// Gradient-free forward pass on a batch.
    pub fn forward(&self, input: &Tensor<T>) -> Result<GeneratorOutput<T>> {
        let g = Graph::new();
        let params = self.params.bind(&g, false);
        let x = g.constant(input.clone());
        let vars = self.forward_graph(&g, &params, x)?;
        let out = GeneratorOutput {
            inpainted: g.value(vars.inpainted).clone(),
            mask: g.value(vars.mask).clone(),
            composed: g.value(vars.composed).clone(),
        };
        Ok(out)
    }

    /// Restores a single image, returning `(composed, mask, inpainted)`.
    pub fn restore(&self, image: &Image) -> Result<(Image, Mask, Image)> {
        let out = self.forward(&image.to_tensor())?;
        Ok((
            Image::from_tensor(&out.composed, 0)?,
            Mask::from_tensor(&out.mask, 0)?,
            Image::from_tensor(&out.inpainted, 0)?,
        ))
    }

    /// Forces the mask head to saturate at 1 (`open`) or 0, independent of
    /// the input. With a closed mask the generator is the identity.
    pub fn saturate_mask(&mut self, open: bool) -> Result<()> {
        let Some(branch) = &self.mask else {
            return Err(Error::Config(
                "single-branch generator has no mask head".into(),
            ));
        };
        let (w, b) = (branch.head.weight, branch.head.bias);
        for v in self.params.get_mut(w).data_mut() {
            *v = T::zero();
        }
        let bias = if open { T::lit(1e4) } else { T::lit(-1e4) };
        for v in self.params.get_mut(b).data_mut() {
            *v = bias;
        }
        Ok(())
    }
}

/// `mask ⊙ inpainted + (1 − mask) ⊙ input` for N×C×H×W images and an N×1×H×W mask.
pub fn compose<T: Float>(
    input: &Tensor<T>,
    inpainted: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if inpainted.shape() != input.shape() || mask.shape() != [n, 1, h, w] {
        return Err(Error::Shape(format!(
            "compose: input {:?}, inpainted {:?}, mask {:?}",
            input.shape(),
            inpainted.shape(),
            mask.shape()
        )));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(input.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for p in 0..plane {
                out.data_mut()[off + p] = blend(
                    mask.data()[b * plane + p],
                    inpainted.data()[off + p],
                    input.data()[off + p],
                );
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(branches: Branches) -> GeneratorConfig {
        GeneratorConfig {
            widths: (4, 8),
            dilations: vec![1, 2],
            branches,
            ..GeneratorConfig::default()
        }
    }

    fn input(seed: u64, h: usize, w: usize) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = seed::rng(&[seed]);
        Tensor::from_vec(
            &[1, 3, h, w],
            (0..3 * h * w).map(|_| rng.gen::<f32>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn compose_constant_fields() {
        let i = Tensor::<f64>::full(&[1, 3, 2, 2], 0.2);
        let g = Tensor::full(&[1, 3, 2, 2], 0.8);
        let m = Tensor::full(&[1, 1, 2, 2], 0.5);
        let out = compose(&i, &g, &m).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert_eq!(compose(&i, &g, &Tensor::zeros(&[1, 1, 2, 2])).unwrap(), i);
        assert_eq!(
            compose(&i, &g, &Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap(),
            g
        );
        assert!(compose(&i, &g, &Tensor::zeros(&[1, 1, 2, 3])).is_err());
    }

    #[test]
    fn output_satisfies_composition_identity_and_ranges() {
        let gen = Generator::<f32>::new(small_config(Branches::Two)).unwrap();
        let x = input(1, 16, 12);
        let out = gen.forward(&x).unwrap();
        assert_eq!(out.mask.shape(), &[1, 1, 16, 12]);
        assert_eq!(
            compose(&x, &out.inpainted, &out.mask).unwrap(),
            out.composed
        );
        for t in [&out.inpainted, &out.mask, &out.composed] {
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn saturated_masks_select_input_or_inpainting() {
        let mut gen = Generator::<f32>::new(small_config(Branches::Two)).unwrap();
        let x = input(2, 8, 8);
        gen.saturate_mask(false).unwrap();
        let out = gen.forward(&x).unwrap();
        assert_eq!(out.composed, x);
        gen.saturate_mask(true).unwrap();
        let out = gen.forward(&x).unwrap();
        assert_eq!(out.composed, out.inpainted);
    }

    #[test]
    fn single_branch_has_unit_mask() {
        let gen = Generator::<f32>::new(small_config(Branches::Single)).unwrap();
        let (_, mask_params) = gen.branch_param_indices();
        assert!(mask_params.is_empty());
        let out = gen.forward(&input(3, 8, 8)).unwrap();
        assert!(out.mask.data().iter().all(|&v| v == 1.0));
        assert_eq!(out.composed, out.inpainted);
    }

    #[test]
    fn indivisible_size_names_the_factor() {
        let gen = Generator::<f32>::new(small_config(Branches::Two)).unwrap();
        let err = gen.forward(&input(4, 10, 8)).unwrap_err().to_string();
        assert!(err.contains("multiple of 4"), "{err}");
    }

    #[test]
    fn branches_share_shapes_except_output_channels() {
        let gen = Generator::<f32>::new(small_config(Branches::Two)).unwrap();
        let (a, b) = gen.branch_param_indices();
        assert_eq!(a.len(), b.len());
        for (&i, &j) in a.iter().zip(&b) {
            let (ni, nj) = (&gen.params().names()[i], &gen.params().names()[j]);
            assert_eq!(
                ni.trim_start_matches("inpaint."),
                nj.trim_start_matches("mask.")
            );
            let (si, sj) = (gen.params().get(i).shape(), gen.params().get(j).shape());
            if ni.contains("head") {
                assert_eq!(&si[1..], &sj[1..]);
                assert_eq!((si[0], sj[0]), (3, 1));
            } else {
                assert_eq!(si, sj);
            }
        }
    }

    #[test]
    fn perturbing_one_branch_leaves_the_other_output_unchanged() {
        let base = Generator::<f32>::new(small_config(Branches::Two)).unwrap();
        let x = input(5, 8, 8);
        let ref_out = base.forward(&x).unwrap();
        let (theta1, theta2) = base.branch_param_indices();

        let mut g1 = base.clone();
        for &i in &theta1 {
            for v in g1.params_mut().get_mut(i).data_mut() {
                *v += 0.05;
            }
        }
        let out = g1.forward(&x).unwrap();
        assert_eq!(out.mask, ref_out.mask);
        assert_ne!(out.inpainted, ref_out.inpainted);

        let mut g2 = base.clone();
        for &i in &theta2 {
            for v in g2.params_mut().get_mut(i).data_mut() {
                *v += 0.05;
            }
        }
        let out = g2.forward(&x).unwrap();
        assert_eq!(out.inpainted, ref_out.inpainted);
        assert_ne!(out.mask, ref_out.mask);
    }

    #[test]
    fn same_seed_same_weights_across_precisions() {
        let a = Generator::<f32>::new(small_config(Branches::Two)).unwrap();
        let b = Generator::<f64>::new(small_config(Branches::Two)).unwrap();
        assert_eq!(a.params().cast::<f32>(), b.params().cast::<f32>());
    }
}
