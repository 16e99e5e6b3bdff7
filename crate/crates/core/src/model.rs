//! Small dense classifiers with frozen base weights and LoRA adapters on
//! chosen layers.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapters::{LoraAdapter, RankChange};
use crate::error::{Error, Result};
use crate::numerics::{GradTape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// Architecture: `widths[0]` is the input width and the last entry is the
/// class count; layer `l` maps `widths[l] → widths[l + 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub adapted: Vec<usize>,
}

impl ModelSpec {
    /// Adapters on every layer.
    pub fn mlp(widths: Vec<usize>) -> Self {
        let adapted = (0..widths.len().saturating_sub(1)).collect();
        ModelSpec {
            widths,
            activation: Activation::Relu,
            adapted,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().expect("validated spec")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.classes() < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        let mut seen = vec![false; self.num_layers()];
        for &l in &self.adapted {
            if l >= self.num_layers() {
                return Err(Error::Config(format!(
                    "adapted layer {l} does not exist ({} layers)",
                    self.num_layers()
                )));
            }
            if std::mem::replace(&mut seen[l], true) {
                return Err(Error::Config(format!("layer {l} adapted twice")));
            }
        }
        Ok(())
    }
}

/// Features, labels and ids for one or more samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

impl Batch {
    pub fn new(features: Tensor, labels: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::dim("batch", features.shape(), &[]));
        }
        if labels.is_empty() {
            return Err(Error::Input("batch must hold at least one sample".into()));
        }
        if features.rows() != labels.len() || ids.len() != labels.len() {
            return Err(Error::dim("batch", features.shape(), &[labels.len(), ids.len()]));
        }
        Ok(Batch {
            features,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The `i`-th sample as a batch of one.
    pub fn sample(&self, i: usize) -> Batch {
        Batch {
            features: self.features.select_rows(&[i]).expect("row in range"),
            labels: vec![self.labels[i]],
            ids: vec![self.ids[i]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `d_out×d_in`.
    pub weight: Tensor,
    /// `1×d_out`.
    pub bias: Tensor,
}

/// Gradient for one adapted layer, in full-capacity factor layout. Masked
/// components always carry zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub layer: usize,
    pub a: Tensor,
    pub b: Tensor,
    /// Gradient w.r.t. the frozen base weight; only filled by probe passes.
    pub weight: Option<Tensor>,
}

/// Gradients over all trainable leaves, one entry per adapted layer in
/// ascending layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub layers: Vec<LayerGrad>,
}

impl AdapterGrads {
    pub fn zeros_like(state: &ModelState) -> Self {
        let layers = state
            .adapted_layers()
            .iter()
            .map(|&l| {
                let ad = state.adapter(l).expect("adapted layer");
                LayerGrad {
                    layer: l,
                    a: Tensor::zeros(ad.a().shape()),
                    b: Tensor::zeros(ad.b().shape()),
                    weight: None,
                }
            })
            .collect();
        AdapterGrads { layers }
    }

    /// Squared ℓ₂ norm over the trainable factors (base-weight probes excluded).
    pub fn sq_norm(&self) -> f64 {
        self.layers.iter().map(|g| g.a.sq_norm() + g.b.sq_norm()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    /// Trainable factors flattened layer by layer, `A` then `B`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(g.a.data());
            out.extend_from_slice(g.b.data());
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.a = g.a.scale(factor);
            g.b = g.b.scale(factor);
            if let Some(w) = &mut g.weight {
                *w = w.scale(factor);
            }
        }
    }

    pub fn add_assign(&mut self, other: &AdapterGrads) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Contract("gradient layouts differ".into()));
        }
        for (g, o) in self.layers.iter_mut().zip(&other.layers) {
            g.a.add_assign(&o.a)?;
            g.b.add_assign(&o.b)?;
            match (&mut g.weight, &o.weight) {
                (Some(w), Some(ow)) => w.add_assign(ow)?,
                (slot @ None, Some(ow)) => *slot = Some(ow.clone()),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|g| {
            g.a.is_finite() && g.b.is_finite() && g.weight.as_ref().is_none_or(Tensor::is_finite)
        })
    }
}

struct LayerVars {
    layer: usize,
    weight: Option<Var>,
    a: Option<Var>,
    b: Option<Var>,
    active: Vec<usize>,
}

/// Frozen base network plus adapters. The adapters are the only trainable
/// leaves; base weights are fixed at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    spec: ModelSpec,
    layers: Vec<DenseLayer>,
    adapters: Vec<Option<LoraAdapter>>,
    step: u64,
}

impl ModelState {
    /// He-normal base weights, zero biases, fresh adapters at `r_init`.
    pub fn init(spec: &ModelSpec, r_init: usize, r_max: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.num_layers());
        for l in 0..spec.num_layers() {
            let (d_in, d_out) = (spec.widths[l], spec.widths[l + 1]);
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 2 * l as u64));
            let normal = Normal::new(0.0, (2.0 / d_in as f64).sqrt()).expect("valid normal");
            layers.push(DenseLayer {
                weight: Tensor::from_fn(d_out, d_in, |_, _| normal.sample(&mut rng)),
                bias: Tensor::zeros(&[1, d_out]),
            });
        }
        let mut adapters = vec![None; spec.num_layers()];
        for &l in &spec.adapted {
            let (d_in, d_out) = (spec.widths[l], spec.widths[l + 1]);
            adapters[l] = Some(LoraAdapter::init(
                d_in,
                d_out,
                r_init,
                r_max,
                mix(seed, 2 * l as u64 + 1),
            )?);
        }
        Ok(ModelState {
            spec: spec.clone(),
            layers,
            adapters,
            step: 0,
        })
    }

    /// Assembles a state from explicit parts.
    pub fn from_parts(
        spec: &ModelSpec,
        layers: Vec<DenseLayer>,
        adapters: Vec<Option<LoraAdapter>>,
    ) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.num_layers() || adapters.len() != spec.num_layers() {
            return Err(Error::Config("layer count does not match the spec".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            let want = [spec.widths[l + 1], spec.widths[l]];
            if layer.weight.shape() != want {
                return Err(Error::dim("from_parts", &want, layer.weight.shape()));
            }
            if layer.bias.shape() != [1, want[0]] {
                return Err(Error::dim("from_parts", &[1, want[0]], layer.bias.shape()));
            }
            let adapted = spec.adapted.contains(&l);
            match &adapters[l] {
                Some(ad) if adapted => {
                    if ad.d_in() != want[1] || ad.d_out() != want[0] {
                        return Err(Error::dim(
                            "from_parts",
                            &want,
                            &[ad.d_out(), ad.d_in()],
                        ));
                    }
                }
                None if !adapted => {}
                _ => {
                    return Err(Error::Config(format!(
                        "adapter presence on layer {l} disagrees with the spec"
                    )))
                }
            }
        }
        Ok(ModelState {
            spec: spec.clone(),
            layers,
            adapters,
            step: 0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Adapted layer indices, ascending.
    pub fn adapted_layers(&self) -> Vec<usize> {
        self.adapters
            .iter()
            .enumerate()
            .filter_map(|(l, a)| a.as_ref().map(|_| l))
            .collect()
    }

    pub fn adapter(&self, layer: usize) -> Option<&LoraAdapter> {
        self.adapters.get(layer).and_then(Option::as_ref)
    }

    pub fn adapter_mut(&mut self, layer: usize) -> Option<&mut LoraAdapter> {
        self.adapters.get_mut(layer).and_then(Option::as_mut)
    }

    /// `(layer, active rank)` for each adapted layer.
    pub fn ranks(&self) -> Vec<(usize, usize)> {
        self.adapted_layers()
            .into_iter()
            .map(|l| (l, self.adapters[l].as_ref().unwrap().active_rank()))
            .collect()
    }

    pub fn trainable_params(&self) -> usize {
        self.adapters
            .iter()
            .flatten()
            .map(LoraAdapter::trainable_params)
            .sum()
    }

    pub fn set_rank(&mut self, layer: usize, new_rank: usize) -> Result<RankChange> {
        let ad = self
            .adapter_mut(layer)
            .ok_or_else(|| Error::Input(format!("layer {layer} has no adapter")))?;
        let mut change = ad.set_active_rank(new_rank)?;
        change.layer = layer;
        Ok(change)
    }

    /// Fingerprint of the frozen base weights and biases.
    pub fn base_checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for layer in &self.layers {
            hash_tensor(&layer.weight, &mut h);
            hash_tensor(&layer.bias, &mut h);
        }
        h.finish()
    }

    /// Fingerprint of everything, adapters and masks included.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.base_checksum().hash(&mut h);
        for ad in self.adapters.iter().flatten() {
            hash_tensor(ad.a(), &mut h);
            hash_tensor(ad.b(), &mut h);
            ad.mask().hash(&mut h);
        }
        self.step.hash(&mut h);
        h.finish()
    }

    fn check_width(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.spec.input_width() {
            return Err(Error::Input(format!(
                "feature shape {:?} does not match input width {}",
                x.shape(),
                self.spec.input_width()
            )));
        }
        Ok(())
    }

    /// Logits for a feature matrix, computed without a tape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_width(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = h.matmul_nt(&layer.weight)?.add_row(&layer.bias)?;
            if let Some(ad) = &self.adapters[l] {
                if ad.active_rank() > 0 {
                    let down = h.matmul_nt(&ad.active_a())?;
                    out = out.add(&down.matmul_nt(&ad.active_b())?)?;
                }
            }
            if l != last && self.spec.activation == Activation::Relu {
                out = out.relu();
            }
            h = out;
        }
        Ok(h)
    }

    /// Frozen-base logits, ignoring all adapters.
    pub fn forward_base(&self, x: &Tensor) -> Result<Tensor> {
        self.check_width(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            h = h.matmul_nt(&layer.weight)?.add_row(&layer.bias)?;
            if l != last && self.spec.activation == Activation::Relu {
                h = h.relu();
            }
        }
        Ok(h)
    }

    fn record(&self, tape: &mut GradTape, x: &Tensor, probe: bool) -> Result<(Var, Vec<LayerVars>)> {
        let last = self.layers.len() - 1;
        let mut h = tape.constant(x.clone());
        let mut vars = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let adapter = self.adapters[l].as_ref();
            let w = if probe && adapter.is_some() {
                tape.param(layer.weight.clone())
            } else {
                tape.constant(layer.weight.clone())
            };
            let bias = tape.constant(layer.bias.clone());
            let mut out = tape.matmul_nt(h, w)?;
            out = tape.add_row(out, bias)?;
            if let Some(ad) = adapter {
                let active = ad.active_indices();
                let mut lv = LayerVars {
                    layer: l,
                    weight: probe.then_some(w),
                    a: None,
                    b: None,
                    active,
                };
                if !lv.active.is_empty() {
                    let a = tape.param(ad.active_a());
                    let b = tape.param(ad.active_b());
                    let down = tape.matmul_nt(h, a)?;
                    let up = tape.matmul_nt(down, b)?;
                    out = tape.add(out, up)?;
                    lv.a = Some(a);
                    lv.b = Some(b);
                }
                vars.push(lv);
            }
            if l != last && self.spec.activation == Activation::Relu {
                out = tape.relu(out);
            }
            h = out;
        }
        Ok((h, vars))
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let logits = self.forward(&batch.features)?;
        let k = logits.cols();
        if let Some(&bad) = batch.labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
        }
        let total: f64 = batch
            .labels
            .iter()
            .enumerate()
            .map(|(i, &l)| crate::numerics::cross_entropy_row(logits.row(i), l))
            .sum();
        Ok(total / batch.len() as f64)
    }

    /// Loss and gradient of the mean cross-entropy over `batch`.
    ///
    /// With `probe` set, gradients w.r.t. the frozen base weights of adapted
    /// layers are also returned; they are never applied as updates.
    pub fn gradient(&self, batch: &Batch, probe: bool) -> Result<(f64, AdapterGrads)> {
        self.check_width(&batch.features)?;
        let mut tape = GradTape::new();
        let (logits, vars) = self.record(&mut tape, &batch.features, probe)?;
        let loss = tape.cross_entropy(logits, &batch.labels)?;
        let loss_value = tape.value(loss).item()?;
        let mut grads = tape.backward(loss)?;
        let mut layers = Vec::with_capacity(vars.len());
        for lv in vars {
            let ad = self.adapters[lv.layer].as_ref().unwrap();
            let mut a = Tensor::zeros(ad.a().shape());
            let mut b = Tensor::zeros(ad.b().shape());
            if let (Some(av), Some(bv)) = (lv.a, lv.b) {
                let ga = grads.take(av).expect("param gradient");
                let gb = grads.take(bv).expect("param gradient");
                let r_max = ad.capacity();
                for (k, &i) in lv.active.iter().enumerate() {
                    a.data_mut()[i * ad.d_in()..(i + 1) * ad.d_in()].copy_from_slice(ga.row(k));
                    for r in 0..ad.d_out() {
                        b.data_mut()[r * r_max + i] = gb.get(r, k);
                    }
                }
            }
            let weight = lv.weight.map(|w| grads.take(w).expect("param gradient"));
            layers.push(LayerGrad {
                layer: lv.layer,
                a,
                b,
                weight,
            });
        }
        Ok((loss_value, AdapterGrads { layers }))
    }

    /// Gradient for a single sample (a batch of one).
    pub fn per_sample_gradient(&self, sample: &Batch, probe: bool) -> Result<(f64, AdapterGrads)> {
        if sample.len() != 1 {
            return Err(Error::Input(format!(
                "per-sample gradient needs one sample, got {}",
                sample.len()
            )));
        }
        self.gradient(sample, probe)
    }

    /// Plain SGD on the active adapter entries. A zero rate is a no-op.
    pub fn sgd_step(&mut self, grads: &AdapterGrads, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be ≥ 0, got {lr}")));
        }
        let adapted = self.adapted_layers();
        if grads.layers.len() != adapted.len()
            || grads.layers.iter().zip(&adapted).any(|(g, &l)| g.layer != l)
        {
            return Err(Error::Contract(
                "gradient does not cover exactly the trainable leaves".into(),
            ));
        }
        for g in &grads.layers {
            self.adapters[g.layer]
                .as_mut()
                .unwrap()
                .apply_update(&g.a, &g.b, lr)?;
        }
        self.step += 1;
        Ok(())
    }
}

fn hash_tensor(t: &Tensor, h: &mut impl Hasher) {
    t.shape().hash(h);
    for v in t.data() {
        v.to_bits().hash(h);
    }
}

/// SplitMix-style seed derivation for independent sub-streams.
pub(crate) fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
