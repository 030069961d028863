use std::ops::Range;

use ndarray::{ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Real};

const INIT_STD: f64 = 0.02;

/// Name and shape of one parameter tensor in manifest order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Location of one tensor inside the flat parameter buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.rows * self.cols
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerSlots {
    pub q_w: Slot,
    pub q_b: Slot,
    pub k_w: Slot,
    pub k_b: Slot,
    pub v_w: Slot,
    pub v_b: Slot,
    pub o_w: Slot,
    pub o_b: Slot,
    pub ln1_scale: Slot,
    pub ln1_shift: Slot,
    pub ffn_w1: Slot,
    pub ffn_b1: Slot,
    pub ffn_w2: Slot,
    pub ffn_b2: Slot,
    pub ln2_scale: Slot,
    pub ln2_shift: Slot,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub entries: Vec<ParamEntry>,
    pub tok_emb: Slot,
    pub pos_emb: Slot,
    pub layers: Vec<LayerSlots>,
    pub head_w: Slot,
    pub head_b: Slot,
    pub total: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zero,
    One,
}

struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    inits: Vec<Init>,
    offset: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> Slot {
        let (rows, cols) = match *shape {
            [n] => (1, n),
            [r, c] => (r, c),
            _ => unreachable!("parameters are vectors or matrices"),
        };
        let slot = Slot { offset: self.offset, rows, cols };
        self.offset += rows * cols;
        self.entries.push(ParamEntry { name, shape: shape.to_vec() });
        self.inits.push(init);
        slot
    }
}

impl Layout {
    fn build(cfg: &ModelConfig) -> (Self, Vec<Init>) {
        let (v, d, f, l) = (cfg.vocab_size, cfg.hidden_dim, cfg.ffn_dim, cfg.max_seq_len);
        let mut b = LayoutBuilder { entries: Vec::new(), inits: Vec::new(), offset: 0 };
        let tok_emb = b.add("tok_emb".into(), &[v, d], Init::Normal);
        let pos_emb = b.add("pos_emb".into(), &[l, d], Init::Normal);
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let mut attn = |p: &str| {
                    (
                        b.add(format!("layer{i}.attn.{p}.w"), &[d, d], Init::Normal),
                        b.add(format!("layer{i}.attn.{p}.b"), &[d], Init::Zero),
                    )
                };
                let (q_w, q_b) = attn("q");
                let (k_w, k_b) = attn("k");
                let (v_w, v_b) = attn("v");
                let (o_w, o_b) = attn("o");
                let ln1_scale = b.add(format!("layer{i}.ln1.scale"), &[d], Init::One);
                let ln1_shift = b.add(format!("layer{i}.ln1.shift"), &[d], Init::Zero);
                let ffn_w1 = b.add(format!("layer{i}.ffn.w1"), &[d, f], Init::Normal);
                let ffn_b1 = b.add(format!("layer{i}.ffn.b1"), &[f], Init::Zero);
                let ffn_w2 = b.add(format!("layer{i}.ffn.w2"), &[f, d], Init::Normal);
                let ffn_b2 = b.add(format!("layer{i}.ffn.b2"), &[d], Init::Zero);
                let ln2_scale = b.add(format!("layer{i}.ln2.scale"), &[d], Init::One);
                let ln2_shift = b.add(format!("layer{i}.ln2.shift"), &[d], Init::Zero);
                LayerSlots {
                    q_w,
                    q_b,
                    k_w,
                    k_b,
                    v_w,
                    v_b,
                    o_w,
                    o_b,
                    ln1_scale,
                    ln1_shift,
                    ffn_w1,
                    ffn_b1,
                    ffn_w2,
                    ffn_b2,
                    ln2_scale,
                    ln2_shift,
                }
            })
            .collect();
        let head_w = b.add("head.w".into(), &[d, v], Init::Normal);
        let head_b = b.add("head.b".into(), &[v], Init::Zero);
        let layout = Layout { entries: b.entries, tok_emb, pos_emb, layers, head_w, head_b, total: b.offset };
        (layout, b.inits)
    }
}

/// Closed-form parameter count for a configuration.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (v, d, f, l) = (cfg.vocab_size, cfg.hidden_dim, cfg.ffn_dim, cfg.max_seq_len);
    let per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * f + f) + (f * d + d);
    v * d + l * d + cfg.n_layers * per_layer + d * v + v
}

/// All weights of the encoder, stored in one flat buffer in manifest order.
#[derive(Debug, Clone)]
pub struct ModelParameters<F = f32> {
    config: ModelConfig,
    pub(crate) layout: Layout,
    pub(crate) data: Vec<F>,
}

impl<F: Real> ModelParameters<F> {
    /// Seeded truncated-normal (std 0.02, cut at two standard deviations)
    /// weights, zero biases, unit layer-norm scales.
    pub fn init(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (layout, inits) = Layout::build(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut data = Vec::with_capacity(layout.total);
        for (entry, init) in layout.entries.iter().zip(inits) {
            let n = entry.numel();
            match init {
                Init::Zero => data.extend(std::iter::repeat_n(F::zero(), n)),
                Init::One => data.extend(std::iter::repeat_n(F::one(), n)),
                Init::Normal => {
                    for _ in 0..n {
                        let z = loop {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            if z.abs() <= 2.0 {
                                break z;
                            }
                        };
                        data.push(F::of(z * INIT_STD));
                    }
                }
            }
        }
        Ok(Self { config: cfg.clone(), layout, data })
    }

    /// Parameters of the given shape with every entry zero.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (layout, _) = Layout::build(cfg);
        let data = vec![F::zero(); layout.total];
        Ok(Self { config: cfg.clone(), layout, data })
    }

    pub(crate) fn from_flat(cfg: &ModelConfig, data: Vec<F>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (layout, _) = Layout::build(cfg);
        if data.len() != layout.total {
            return Err(ModelError::Config(format!(
                "flat buffer has {} values, config needs {}",
                data.len(),
                layout.total
            )));
        }
        Ok(Self { config: cfg.clone(), layout, data })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn manifest(&self) -> &[ParamEntry] {
        &self.layout.entries
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Flat range of a named tensor.
    pub fn range_of(&self, name: &str) -> Option<Range<usize>> {
        let mut offset = 0;
        for e in &self.layout.entries {
            if e.name == name {
                return Some(offset..offset + e.numel());
            }
            offset += e.numel();
        }
        None
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.range_of(name).map(|r| &self.data[r])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [F]> {
        self.range_of(name).map(move |r| &mut self.data[r])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Real>(&self) -> ModelParameters<G> {
        ModelParameters {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|&x| G::of(x.to_f64_lossy())).collect(),
        }
    }

    pub(crate) fn mat(&self, s: Slot) -> ArrayView2<'_, F> {
        ArrayView2::from_shape((s.rows, s.cols), &self.data[s.range()]).expect("slot fits buffer")
    }

    pub(crate) fn vector(&self, s: Slot) -> ArrayView1<'_, F> {
        ArrayView1::from(&self.data[s.range()])
    }

    pub(crate) fn add_to(&mut self, s: Slot, values: &[F]) {
        debug_assert_eq!(values.len(), s.rows * s.cols);
        for (g, &v) in self.data[s.range()].iter_mut().zip(values) {
            *g += v;
        }
    }
}

impl<F: Real> PartialEq for ModelParameters<F> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig { seed: 9, ..ModelConfig::new(50) };
        let a = ModelParameters::<f32>::init(&cfg).unwrap();
        let b = ModelParameters::<f32>::init(&cfg).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = ModelParameters::<f32>::init(&ModelConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.as_slice(), c.as_slice());
    }

    #[test]
    fn init_values() {
        let cfg = ModelConfig::new(182);
        let p = ModelParameters::<f32>::init(&cfg).unwrap();
        for i in 0..cfg.n_layers {
            assert!(p.tensor(&format!("layer{i}.ln1.scale")).unwrap().iter().all(|&x| x == 1.0));
            assert!(p.tensor(&format!("layer{i}.ln2.scale")).unwrap().iter().all(|&x| x == 1.0));
            assert!(p.tensor(&format!("layer{i}.ln1.shift")).unwrap().iter().all(|&x| x == 0.0));
            assert!(p.tensor(&format!("layer{i}.attn.q.b")).unwrap().iter().all(|&x| x == 0.0));
        }
        let w = p.tensor("layer0.ffn.w1").unwrap();
        assert!(w.iter().all(|&x| x.abs() <= 0.04));
        let mean = w.iter().map(|&x| x as f64).sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / w.len() as f64;
        // Truncation at 2 sigma shrinks the std by a factor of about 0.88.
        assert!((var.sqrt() - 0.02 * 0.8796).abs() < 1e-3, "std {}", var.sqrt());
    }

    #[test]
    fn default_param_count_matches_shapes() {
        let cfg = ModelConfig::new(182);
        let p = ModelParameters::<f32>::init(&cfg).unwrap();
        // 182*96 + 64*96 + 6*(4*(96*96+96) + 4*96 + 96*384 + 384 + 384*96 + 96) + 96*182 + 182
        let by_hand =
            182 * 96 + 64 * 96 + 6 * (4 * (96 * 96 + 96) + 4 * 96 + 96 * 384 + 384 + 384 * 96 + 96) + 96 * 182 + 182;
        assert_eq!(by_hand, 712_310);
        assert_eq!(p.len(), by_hand);
        assert_eq!(param_count(&cfg), by_hand);
        assert_eq!(p.manifest().iter().map(ParamEntry::numel).sum::<usize>(), by_hand);
    }

    #[test]
    fn manifest_names() {
        let cfg = ModelConfig { n_layers: 2, ..ModelConfig::new(20) };
        let p = ModelParameters::<f32>::zeros(&cfg).unwrap();
        let names: Vec<_> = p.manifest().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names[0], "tok_emb");
        assert_eq!(names[1], "pos_emb");
        assert!(names.contains(&"layer1.attn.o.b"));
        assert!(names.contains(&"layer0.ffn.w2"));
        assert_eq!(names[names.len() - 2..], ["head.w", "head.b"]);
    }
}
