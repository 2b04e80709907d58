//! Visual extractor: a small pre-norm patch transformer followed by the
//! linear map to the model width and a final layer norm.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result, TksgError};
use crate::nn::{dropout, DropoutCtx, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{embedding_init, ParamGroup, ParamId, ParamStore};
use crate::tensor::{read_tensor, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    /// Internal transformer width.
    pub d_b: usize,
    /// Output width of the visual features.
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

impl EncoderConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// An `H × W × C` image with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let [_, _, c] = t.shape() else {
            return Err(shape_err("ImageTensor", format!("expected H×W×C, got {:?}", t.shape())));
        };
        if *c != 1 && *c != 3 {
            return Err(TksgError::Invalid(format!("image must have 1 or 3 channels, got {c}")));
        }
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(TksgError::Invalid("pixel values must lie in [0, 1]".into()));
        }
        Ok(ImageTensor(t))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Single-channel copy; RGB is averaged.
    pub fn to_grayscale(&self) -> ImageTensor {
        if self.channels() == 1 {
            return self.clone();
        }
        let data: Vec<f64> = self.0.data().chunks(3).map(|px| px.iter().sum::<f64>() / 3.0).collect();
        ImageTensor(Tensor::new(vec![self.height(), self.width(), 1], data).expect("gray shape"))
    }
}

/// The encoder output `X`: one row of width `d_h` per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures(pub Tensor);

impl VisualFeatures {
    pub fn new(t: Tensor, d_h: usize) -> Result<Self> {
        match t.shape() {
            [_, d] if *d == d_h => {}
            s => return Err(shape_err("VisualFeatures", format!("expected N×{d_h}, got {s:?}"))),
        }
        if !t.is_finite() {
            return Err(TksgError::NonFinite { op: "visual features" });
        }
        Ok(VisualFeatures(t))
    }

    pub fn num_patches(&self) -> usize {
        self.0.rows()
    }
}

/// What the model consumes for one sample's image.
#[derive(Clone, Debug, PartialEq)]
pub enum VisualInput {
    Image(ImageTensor),
    Features(VisualFeatures),
}

/// Source indices mapping an `H×W×C` buffer to raster-ordered flattened
/// patches (`N × patch²·C`).
pub fn patch_indices(h: usize, w: usize, c: usize, patch: usize) -> Result<Vec<usize>> {
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(TksgError::Invalid(format!(
            "image {h}×{w} is not divisible into {patch}×{patch} patches"
        )));
    }
    let mut src = Vec::with_capacity(h * w * c);
    for pr in 0..h / patch {
        for pc in 0..w / patch {
            for r in 0..patch {
                for col in 0..patch {
                    for ch in 0..c {
                        let y = pr * patch + r;
                        let x = pc * patch + col;
                        src.push((y * w + x) * c + ch);
                    }
                }
            }
        }
    }
    Ok(src)
}

/// Splits an image into raster-ordered flattened patches.
pub fn patchify(img: &ImageTensor, patch: usize) -> Result<Tensor> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let src = patch_indices(h, w, c, patch)?;
    let n = (h / patch) * (w / patch);
    let data = src.iter().map(|&s| img.0.data()[s]).collect();
    Tensor::new(vec![n, patch * patch * c], data)
}

/// Loads an `N × d_h` feature file written in the binary tensor format.
pub fn load_precomputed(path: &Path, d_h: usize) -> Result<VisualFeatures> {
    let t = read_tensor(path)?;
    VisualFeatures::new(t, d_h).map_err(|e| TksgError::TensorFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads an image (3-D file) or precomputed features (2-D file).
pub fn load_visual(path: &Path, d_h: usize) -> Result<VisualInput> {
    let t = read_tensor(path)?;
    match t.ndim() {
        3 => Ok(VisualInput::Image(ImageTensor::new(t)?)),
        2 => Ok(VisualInput::Features(VisualFeatures::new(t, d_h).map_err(|e| {
            TksgError::TensorFile {
                path: path.to_path_buf(),
                reason: e.to_string(),
            }
        })?)),
        _ => Err(TksgError::TensorFile {
            path: path.to_path_buf(),
            reason: format!("expected an H×W×C image or N×d_h features, got shape {:?}", t.shape()),
        }),
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub config: EncoderConfig,
    patch_embed: Linear,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
    ln_body: LayerNorm,
    /// `W^enc`, `b^enc`.
    pub proj: Linear,
    pub ln_out: LayerNorm,
}

impl VisualEncoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        patch_indices(config.image_height, config.image_width, 1, config.patch_size)?;
        let g = ParamGroup::Encoder;
        let d_b = config.d_b;
        let patch_embed = Linear::new(store, "enc.patch_embed", config.patch_dim(), d_b, true, g, rng);
        let pos = store.add("enc.pos", embedding_init(rng, config.num_patches(), d_b, 0.02), g);
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("enc.layer{i}");
            layers.push(EncoderLayer {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d_b, g),
                attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d_b, config.heads, g, rng)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d_b, g),
                ffn: FeedForward::new(store, &format!("{p}.ffn"), d_b, d_b * config.ff_mult, g, rng),
            });
        }
        let ln_body = LayerNorm::new(store, "enc.ln_body", d_b, g);
        let proj = Linear::new(store, "enc.proj", d_b, config.d_h, true, g, rng);
        let ln_out = LayerNorm::new(store, "enc.ln_out", config.d_h, g);
        Ok(VisualEncoder {
            config,
            patch_embed,
            pos,
            layers,
            ln_body,
            proj,
            ln_out,
        })
    }

    /// Encodes a single-channel `H×W×1` pixel node into `X` (`N × d_h`).
    pub fn forward_pixels(&self, g: &mut Graph, pixels: Var, drop: &mut Option<DropoutCtx>) -> Result<Var> {
        let c = &self.config;
        let shape = g.value(pixels).shape().to_vec();
        if shape != [c.image_height, c.image_width, 1] {
            return Err(shape_err(
                "encode",
                format!("expected {}×{}×1 image, got {shape:?}", c.image_height, c.image_width),
            ));
        }
        let src = patch_indices(c.image_height, c.image_width, 1, c.patch_size)?;
        let patches = g.gather_elems(pixels, src, vec![c.num_patches(), c.patch_dim()])?;
        self.forward_patches(g, patches, drop)
    }

    /// Encodes flattened patches (`N × patch²`).
    pub fn forward_patches(&self, g: &mut Graph, patches: Var, drop: &mut Option<DropoutCtx>) -> Result<Var> {
        let (n, p) = g.value(patches).dims2()?;
        if n != self.config.num_patches() || p != self.config.patch_dim() {
            return Err(shape_err(
                "encode",
                format!(
                    "patches {n}×{p}, encoder expects {}×{}",
                    self.config.num_patches(),
                    self.config.patch_dim()
                ),
            ));
        }
        let x = self.patch_embed.forward(g, patches)?;
        let pos = g.param(self.pos);
        let mut x = g.add(x, pos)?;
        for layer in &self.layers {
            let h = layer.ln1.forward(g, x)?;
            let a = layer.attn.forward(g, h, h, false)?.out;
            let a = dropout(g, a, drop)?;
            x = g.add(x, a)?;
            let h = layer.ln2.forward(g, x)?;
            let f = layer.ffn.forward(g, h, drop)?;
            let f = dropout(g, f, drop)?;
            x = g.add(x, f)?;
        }
        let x = self.ln_body.forward(g, x)?;
        let x = self.proj.forward(g, x)?;
        self.ln_out.forward(g, x)
    }

    /// Encodes an image value (RGB is averaged to one channel first).
    pub fn forward_image(&self, g: &mut Graph, img: &ImageTensor, drop: &mut Option<DropoutCtx>) -> Result<Var> {
        let gray = img.to_grayscale();
        let pixels = g.constant(gray.0);
        self.forward_pixels(g, pixels, drop)
    }

    /// Inference-only encode to a feature value.
    pub fn encode(&self, store: &ParamStore, img: &ImageTensor) -> Result<VisualFeatures> {
        let mut g = Graph::new(store);
        let x = self.forward_image(&mut g, img, &mut None)?;
        VisualFeatures::new(g.value(x).clone(), self.config.d_h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            image_height: 16,
            image_width: 8,
            patch_size: 4,
            d_b: 8,
            d_h: 6,
            layers: 1,
            heads: 2,
            ff_mult: 2,
        }
    }

    #[test]
    fn patchify_shapes() {
        let img = ImageTensor::new(Tensor::zeros(&[64, 64, 1])).unwrap();
        assert_eq!(patchify(&img, 16).unwrap().shape(), &[16, 256]);

        let data: Vec<f64> = (0..256).map(|v| v as f64 / 255.0).collect();
        let img = ImageTensor::new(Tensor::new(vec![16, 16, 1], data.clone()).unwrap()).unwrap();
        let p = patchify(&img, 16).unwrap();
        assert_eq!(p.shape(), &[1, 256]);
        assert_eq!(p.data(), data.as_slice());

        let img = ImageTensor::new(Tensor::full(&[8, 8, 1], 0.3)).unwrap();
        let p = patchify(&img, 4).unwrap();
        for r in 1..4 {
            assert_eq!(p.row(r), p.row(0));
        }
        assert!(patchify(&img, 3).is_err());
    }

    #[test]
    fn patchify_is_raster_ordered() {
        // 4×4 image, patch 2: second patch is the top-right block
        let data: Vec<f64> = (0..16).map(|v| v as f64 / 16.0).collect();
        let img = ImageTensor::new(Tensor::new(vec![4, 4, 1], data).unwrap()).unwrap();
        let p = patchify(&img, 2).unwrap();
        let expect: Vec<f64> = [2.0, 3.0, 6.0, 7.0].iter().map(|v| v / 16.0).collect();
        assert_eq!(p.row(1), expect.as_slice());
    }

    #[test]
    fn image_validation() {
        assert!(ImageTensor::new(Tensor::zeros(&[4, 4, 2])).is_err());
        assert!(ImageTensor::new(Tensor::full(&[4, 4, 1], 1.5)).is_err());
        let rgb = ImageTensor::new(Tensor::new(vec![1, 1, 3], vec![0.0, 0.3, 0.6]).unwrap()).unwrap();
        assert!((rgb.to_grayscale().tensor().item() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = VisualEncoder::new(&mut store, cfg(), &mut rng).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            if !name.ends_with(".gamma") {
                let shape = store.value(id).shape().to_vec();
                store.set_value(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let img = ImageTensor::new(Tensor::full(&[16, 8, 1], 0.7)).unwrap();
        let x = enc.encode(&store, &img).unwrap();
        assert_eq!(x.0.shape(), &[8, 6]);
        assert!(x.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_and_determinism() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = VisualEncoder::new(&mut store, cfg(), &mut rng).unwrap();
        let data: Vec<f64> = (0..128).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let img = ImageTensor::new(Tensor::new(vec![16, 8, 1], data).unwrap()).unwrap();
        let a = enc.encode(&store, &img).unwrap();
        let b = enc.encode(&store, &img).unwrap();
        assert_eq!(a.0.shape(), &[8, 6]);
        assert_eq!(a, b);
        let wrong = ImageTensor::new(Tensor::zeros(&[8, 8, 1])).unwrap();
        assert!(enc.encode(&store, &wrong).is_err());
    }

    #[test]
    fn precomputed_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.tksg");
        let t = Tensor::new(vec![3, 4], (0..12).map(|v| v as f64 * 0.25).collect()).unwrap();
        crate::tensor::write_tensor(&p, &t).unwrap();
        assert_eq!(load_precomputed(&p, 4).unwrap().0, t);
        assert!(load_precomputed(&p, 5).is_err());
        assert!(matches!(load_visual(&p, 4).unwrap(), VisualInput::Features(_)));
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[1] = b'Z';
        std::fs::write(&p, bytes).unwrap();
        assert!(load_precomputed(&p, 4).is_err());
    }
}
