//! Central finite-difference gradient checking.
//!
//! The checker only evaluates forward values, so it is independent of every
//! backward rule it verifies.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Denominator floor for relative errors so exact-zero gradients compare
/// by absolute difference.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64, label: impl FnOnce() -> String) {
        let err = rel_err(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = err.max(self.max_rel_err);
            if err >= self.max_rel_err {
                self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", label());
            }
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = other.max_rel_err.max(self.max_rel_err);
            self.worst = other.worst;
        }
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn loss_value<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let l = f(&mut g)?;
    Ok(g.value(l).item())
}

/// Checks `d loss / d param` for the listed parameters (all when `None`).
/// At most `max_per_param` evenly spaced entries of each parameter are probed.
pub fn check_params<F>(
    store: &ParamStore,
    only: Option<&[ParamId]>,
    max_per_param: usize,
    h: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let l = f(&mut g)?;
        g.backward(l)?
    };
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for id in ids {
        let n = store.value(id).numel();
        let zero = Tensor::zeros(store.value(id).shape());
        let analytic = grads.param(id).unwrap_or(&zero).clone();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = store.value(id).data()[j];
            probe.get_mut(id).value.data_mut()[j] = orig + h;
            let up = loss_value(&probe, &f)?;
            probe.get_mut(id).value.data_mut()[j] = orig - h;
            let down = loss_value(&probe, &f)?;
            probe.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            report.record(analytic.data()[j], numeric, || {
                format!("{}[{j}]", store.get(id).name)
            });
        }
    }
    Ok(report)
}

/// Checks `d loss / d input` for a differentiable input tensor.
pub fn check_input<F>(store: &ParamStore, input: &Tensor, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let x = g.leaf(input.clone());
        let l = f(&mut g, x)?;
        let grads = g.backward(l)?;
        grads
            .wrt(x)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()))
    };
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new(store);
        let x = g.leaf(t.clone());
        let l = f(&mut g, x)?;
        Ok(g.value(l).item())
    };
    let mut report = GradCheckReport::default();
    let mut probe = input.clone();
    for j in 0..input.numel() {
        let orig = input.data()[j];
        probe.data_mut()[j] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[j] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[j] = orig;
        report.record(analytic.data()[j], (up - down) / (2.0 * h), || format!("input[{j}]"));
    }
    Ok(report)
}

/// Per-module gradient check of the full model on a tiny random instance
/// (`d_h = 8`, `N = 4` patches, `N_K = 2`, `|V| = 11`). Every parameter is
/// re-drawn at random first so no gradient is trivially zero. Returns one
/// report per module, keyed by parameter-name prefix.
pub fn model_suite(seed: u64, max_per_param: usize, h: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::decoder::{DecoderConfig, EOS};
    use crate::encoder::{EncoderConfig, ImageTensor, VisualInput};
    use crate::model::{ModelConfig, SampleInput, Targets, TksgModel, Variant};
    use crate::topic::TopicLabels;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        encoder: EncoderConfig {
            image_height: 8,
            image_width: 8,
            patch_size: 4,
            d_b: 8,
            d_h: 8,
            layers: 1,
            heads: 2,
            ff_mult: 2,
        },
        decoder: DecoderConfig {
            layers: 2,
            heads: 2,
            d_h: 8,
            t_max: 6,
            ff_mult: 2,
            dropout: 0.0,
            sg_layers: None,
        },
        d_e: 6,
        n_w: 5,
        n_k: 2,
        vocab_size: 11,
        variant: Variant::Tksg,
    };
    let mut store = ParamStore::new();
    let model = TksgModel::new(&mut store, config, &mut rng)?;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        store.set_value(id, Tensor::new(shape, data)?)?;
    }
    let pixels = (0..64).map(|_| rng.gen::<f64>()).collect();
    let visual = VisualInput::Image(ImageTensor::new(Tensor::new(vec![8, 8, 1], pixels)?)?);
    let retrieved = Tensor::new(vec![3, 6], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let tokens = vec![5, 7, 4, EOS];
    let topics = TopicLabels::from_set(&[1, 4, 9]);
    let concepts = vec![1.0, 0.0, 1.0, 0.0, 0.0];
    let input = SampleInput {
        visual: &visual,
        retrieved: Some(&retrieved),
    };
    let targets = Targets {
        tokens: &tokens,
        topics: &topics,
        concepts: &concepts,
    };
    let loss = |g: &mut Graph| Ok(model.loss(g, &input, &targets, &mut None)?.total);

    let modules: [(&'static str, &str); 5] = [
        ("encoder", "enc."),
        ("retrieval projection", "retr."),
        ("topic guidance", "topic."),
        ("keyword guidance", "kw."),
        ("decoder", "dec."),
    ];
    let mut out = Vec::new();
    for (label, prefix) in modules {
        let only: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect();
        out.push((label, check_params(&store, Some(&only), max_per_param, h, loss)?));
    }
    Ok(out)
}
