//! Encoder, projection head, and classifier head.
//!
//! A [`ModelTriple`] is one network with a shared trunk `F` feeding two heads:
//! the projector `Proj` (contrastive objectives) and the classifier `G`
//! (semi-supervised and CE objectives). [`DuoModel`] holds the two peers used
//! for co-divide training.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{read_checkpoint, softmax_rows, write_checkpoint, Gradients, Graph, Sgd, Tensor, Var};

/// Layer widths of a [`ModelTriple`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    /// Widths of the trunk layers; the last one is `D_r`.
    pub feat_layers: Vec<usize>,
    pub proj_hidden: usize,
    /// `D_z`.
    pub proj_dim: usize,
    pub num_classes: usize,
}

impl Architecture {
    /// `d → 64 → 64` trunk, `64 → 64 → 16` projector, linear classifier.
    pub fn default_for(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            feat_layers: vec![64, 64],
            proj_hidden: 64,
            proj_dim: 16,
            num_classes,
        }
    }

    pub fn rep_dim(&self) -> usize {
        self.feat_layers.last().copied().unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.feat_layers.is_empty()
            || self.feat_layers.contains(&0)
            || self.proj_hidden == 0
            || self.proj_dim == 0
            || self.num_classes < 2
        {
            return Err(Error::Parameter(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in × out]`
    pub weight: Tensor,
    /// `[1 × out]`
    pub bias: Tensor,
}

impl Linear {
    /// Uniform weights in `[-bound, bound]`, zero bias.
    fn init(fan_in: usize, fan_out: usize, bound: f64, rng: &mut Rng) -> Self {
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, data).expect("linear shape"),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }
}

/// Kaiming-uniform bound for a layer followed by ReLU: `sqrt(6 / fan_in)`.
fn relu_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Bound for a layer with no activation after it: `1 / sqrt(fan_in)`.
fn linear_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Which head a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Feat,
    Proj,
    Cls,
}

impl Head {
    pub fn prefix(self) -> &'static str {
        match self {
            Head::Feat => "feat",
            Head::Proj => "proj",
            Head::Cls => "cls",
        }
    }
}

/// Selects which heads receive gradients when a model is bound to a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub feat: bool,
    pub proj: bool,
    pub cls: bool,
}

impl Trainable {
    pub const NONE: Self = Self { feat: false, proj: false, cls: false };
    pub const ALL: Self = Self { feat: true, proj: true, cls: true };
    pub const FEAT_PROJ: Self = Self { feat: true, proj: true, cls: false };
    pub const FEAT_CLS: Self = Self { feat: true, proj: false, cls: true };
    pub const CLS: Self = Self { feat: false, proj: false, cls: true };

    fn get(self, head: Head) -> bool {
        match head {
            Head::Feat => self.feat,
            Head::Proj => self.proj,
            Head::Cls => self.cls,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelTriple {
    arch: Architecture,
    feat: Vec<Linear>,
    proj: Vec<Linear>,
    cls: Vec<Linear>,
}

impl ModelTriple {
    /// Initialisation is a pure function of `(arch, seed)`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::seeded(seed);
        let mut feat = Vec::new();
        let mut fan_in = arch.input_dim;
        for &w in &arch.feat_layers {
            feat.push(Linear::init(fan_in, w, relu_bound(fan_in), &mut rng));
            fan_in = w;
        }
        let rd = arch.rep_dim();
        let proj = vec![
            Linear::init(rd, arch.proj_hidden, relu_bound(rd), &mut rng),
            Linear::init(arch.proj_hidden, arch.proj_dim, linear_bound(arch.proj_hidden), &mut rng),
        ];
        let cls = Self::fresh_classifier(&arch, &mut rng);
        Ok(Self { arch, feat, proj, cls })
    }

    /// All weights and biases zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut feat = Vec::new();
        let mut fan_in = arch.input_dim;
        for &w in &arch.feat_layers {
            feat.push(Linear::zeros(fan_in, w));
            fan_in = w;
        }
        let rd = arch.rep_dim();
        let proj = vec![Linear::zeros(rd, arch.proj_hidden), Linear::zeros(arch.proj_hidden, arch.proj_dim)];
        let cls = vec![Linear::zeros(rd, arch.num_classes)];
        Ok(Self { arch, feat, proj, cls })
    }

    fn fresh_classifier(arch: &Architecture, rng: &mut Rng) -> Vec<Linear> {
        let rd = arch.rep_dim();
        vec![Linear::init(rd, arch.num_classes, linear_bound(rd), rng)]
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    /// Copy with a freshly initialised classifier; trunk and projector are
    /// kept bit-identical.
    pub fn reinit_classifier(&self, rng: &mut Rng) -> Self {
        let mut out = self.clone();
        out.cls = Self::fresh_classifier(&self.arch, rng);
        out
    }

    pub fn zero_classifier(&mut self) {
        for l in &mut self.cls {
            l.weight.data_mut().fill(0.0);
            l.bias.data_mut().fill(0.0);
        }
    }

    fn layers(&self, head: Head) -> &[Linear] {
        match head {
            Head::Feat => &self.feat,
            Head::Proj => &self.proj,
            Head::Cls => &self.cls,
        }
    }

    fn layers_mut(&mut self, head: Head) -> &mut [Linear] {
        match head {
            Head::Feat => &mut self.feat,
            Head::Proj => &mut self.proj,
            Head::Cls => &mut self.cls,
        }
    }

    /// Parameters in checkpoint order, named `feat.0.weight`, `cls.0.bias`, …
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for head in [Head::Feat, Head::Proj, Head::Cls] {
            for (i, l) in self.layers(head).iter().enumerate() {
                out.push((format!("{}.{i}.weight", head.prefix()), &l.weight));
                out.push((format!("{}.{i}.bias", head.prefix()), &l.bias));
            }
        }
        out
    }

    /// Mutable parameters in [`ModelTriple::named_params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.feat.iter_mut().chain(self.proj.iter_mut()).chain(self.cls.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Combined checksum of one head's parameters.
    pub fn head_checksum(&self, head: Head) -> u64 {
        self.layers(head)
            .iter()
            .flat_map(|l| [l.weight.checksum(), l.bias.checksum()])
            .fold(0u64, |acc, c| acc.rotate_left(7) ^ c)
    }

    pub fn checksum(&self) -> u64 {
        [Head::Feat, Head::Proj, Head::Cls]
            .iter()
            .fold(0u64, |acc, &h| acc.rotate_left(13) ^ self.head_checksum(h))
    }

    /// Registers every parameter on `g`; heads not marked trainable become
    /// constants.
    pub fn bind(&self, g: &mut Graph, trainable: Trainable) -> BoundModel {
        let mut bind_head = |head: Head| -> Vec<(Var, Var)> {
            self.layers(head)
                .iter()
                .map(|l| {
                    if trainable.get(head) {
                        (g.param(l.weight.clone()), g.param(l.bias.clone()))
                    } else {
                        (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                    }
                })
                .collect()
        };
        BoundModel {
            feat: bind_head(Head::Feat),
            proj: bind_head(Head::Proj),
            cls: bind_head(Head::Cls),
            trainable,
            input_dim: self.arch.input_dim,
        }
    }

    /// Applies one optimizer step to the trainable heads of `bound`.
    pub fn apply_gradients(&mut self, bound: &BoundModel, grads: &Gradients, sgd: &mut Sgd) -> Result<()> {
        for head in [Head::Feat, Head::Proj, Head::Cls] {
            if !bound.trainable.get(head) {
                continue;
            }
            let vars = bound.head(head).to_vec();
            for (i, (l, (wv, bv))) in self.layers_mut(head).iter_mut().zip(vars).enumerate() {
                let p = head.prefix();
                if let Some(gw) = grads.get(wv) {
                    sgd.step(&format!("{p}.{i}.weight"), &mut l.weight, gw)?;
                }
                if let Some(gb) = grads.get(bv) {
                    sgd.step(&format!("{p}.{i}.bias"), &mut l.bias, gb)?;
                }
            }
        }
        Ok(())
    }

    /// `r = F(x)` without recording gradients.
    pub fn forward_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, Trainable::NONE);
        let xv = g.constant(x.clone());
        let r = b.features(&mut g, xv)?;
        Ok(g.value(r).clone())
    }

    /// `z = normalize(Proj(F(x)))`.
    pub fn forward_projection(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, Trainable::NONE);
        let xv = g.constant(x.clone());
        let r = b.features(&mut g, xv)?;
        let z = b.projection(&mut g, r)?;
        Ok(g.value(z).clone())
    }

    /// `G(F(x))`.
    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, Trainable::NONE);
        let xv = g.constant(x.clone());
        let r = b.features(&mut g, xv)?;
        let l = b.logits(&mut g, r)?;
        Ok(g.value(l).clone())
    }

    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        Ok(softmax_rows(&self.forward_logits(x)?))
    }

    pub fn save<W: std::io::Write>(&self, w: W) -> Result<()> {
        write_checkpoint(w, &self.named_params())
    }

    /// Rebuilds a model from checkpoint parameters, inferring the architecture
    /// from the weight shapes.
    pub fn load<R: std::io::Read>(r: R) -> Result<Self> {
        let params = read_checkpoint(r)?;
        let mut heads: [Vec<(Option<Tensor>, Option<Tensor>)>; 3] = Default::default();
        for (name, t) in params {
            let parts: Vec<&str> = name.split('.').collect();
            let bad = || Error::Parse {
                offset: 0,
                message: format!("unexpected parameter name {name}"),
            };
            if parts.len() != 3 {
                return Err(bad());
            }
            let h = match parts[0] {
                "feat" => 0,
                "proj" => 1,
                "cls" => 2,
                _ => return Err(bad()),
            };
            let idx: usize = parts[1].parse().map_err(|_| bad())?;
            let layers = &mut heads[h];
            if layers.len() <= idx {
                layers.resize_with(idx + 1, || (None, None));
            }
            match parts[2] {
                "weight" => layers[idx].0 = Some(t),
                "bias" => layers[idx].1 = Some(t),
                _ => return Err(bad()),
            }
        }
        let mut built: Vec<Vec<Linear>> = Vec::new();
        for (h, layers) in heads.into_iter().enumerate() {
            let mut out = Vec::new();
            for (i, (w, b)) in layers.into_iter().enumerate() {
                let (Some(weight), Some(bias)) = (w, b) else {
                    return Err(Error::Parse {
                        offset: 0,
                        message: format!("head {h} layer {i} is incomplete"),
                    });
                };
                out.push(Linear { weight, bias });
            }
            built.push(out);
        }
        let cls = built.pop().unwrap_or_default();
        let proj = built.pop().unwrap_or_default();
        let feat = built.pop().unwrap_or_default();
        if feat.is_empty() || proj.len() != 2 || cls.len() != 1 {
            return Err(Error::Parse {
                offset: 0,
                message: "checkpoint does not describe a feat/proj/cls model".into(),
            });
        }
        let arch = Architecture {
            input_dim: feat[0].weight.rows(),
            feat_layers: feat.iter().map(|l| l.weight.cols()).collect(),
            proj_hidden: proj[0].weight.cols(),
            proj_dim: proj[1].weight.cols(),
            num_classes: cls[0].weight.cols(),
        };
        arch.validate()?;
        let model = Self { arch, feat, proj, cls };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let mut prev = self.arch.input_dim;
        for l in &self.feat {
            if l.weight.rows() != prev || l.bias.shape() != [1, l.weight.cols()] {
                return Err(Error::dim("ModelTriple::load", "trunk layer shapes do not chain"));
            }
            prev = l.weight.cols();
        }
        let rd = self.arch.rep_dim();
        if self.proj[0].weight.rows() != rd
            || self.proj[1].weight.rows() != self.proj[0].weight.cols()
            || self.cls[0].weight.rows() != rd
        {
            return Err(Error::dim("ModelTriple::load", "head input widths must equal D_r"));
        }
        Ok(())
    }
}

/// Graph handles for a model's parameters.
pub struct BoundModel {
    feat: Vec<(Var, Var)>,
    proj: Vec<(Var, Var)>,
    cls: Vec<(Var, Var)>,
    trainable: Trainable,
    input_dim: usize,
}

impl BoundModel {
    fn head(&self, head: Head) -> &[(Var, Var)] {
        match head {
            Head::Feat => &self.feat,
            Head::Proj => &self.proj,
            Head::Cls => &self.cls,
        }
    }

    pub fn trainable(&self) -> Trainable {
        self.trainable
    }

    /// Weight and bias handles of one head.
    pub fn head_vars(&self, head: Head) -> &[(Var, Var)] {
        self.head(head)
    }

    fn dense(g: &mut Graph, x: Var, (w, b): (Var, Var)) -> Result<Var> {
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }

    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (_, d) = g.value(x).expect_matrix("forward_features")?;
        if d != self.input_dim {
            return Err(Error::dim(
                "forward_features",
                format!("input has {d} columns, model expects {}", self.input_dim),
            ));
        }
        let mut h = x;
        for &layer in &self.feat {
            let a = Self::dense(g, h, layer)?;
            h = g.relu(a);
        }
        Ok(h)
    }

    /// Unit-norm projection of representations `r`.
    pub fn projection(&self, g: &mut Graph, r: Var) -> Result<Var> {
        let a = Self::dense(g, r, self.proj[0])?;
        let h = g.relu(a);
        let z = Self::dense(g, h, self.proj[1])?;
        g.l2_normalize(z)
    }

    pub fn logits(&self, g: &mut Graph, r: Var) -> Result<Var> {
        let mut h = r;
        for (i, &layer) in self.cls.iter().enumerate() {
            if i > 0 {
                h = g.relu(h);
            }
            h = Self::dense(g, h, layer)?;
        }
        Ok(h)
    }
}

/// The two peer networks trained by co-divide.
#[derive(Clone, Debug, PartialEq)]
pub struct DuoModel {
    pub net_a: ModelTriple,
    pub net_b: ModelTriple,
}

impl DuoModel {
    /// Both peers start from `base` with independently re-initialised
    /// classifiers.
    pub fn from_pretrained(base: &ModelTriple, rng: &mut Rng) -> Self {
        Self {
            net_a: base.reinit_classifier(rng),
            net_b: base.reinit_classifier(rng),
        }
    }

    pub fn net(&self, j: usize) -> &ModelTriple {
        if j == 0 {
            &self.net_a
        } else {
            &self.net_b
        }
    }

    pub fn net_mut(&mut self, j: usize) -> &mut ModelTriple {
        if j == 0 {
            &mut self.net_a
        } else {
            &mut self.net_b
        }
    }

    /// Mean of the two peers' softmax outputs.
    pub fn ensemble_proba(&self, x: &Tensor) -> Result<Tensor> {
        let pa = self.net_a.predict_proba(x)?;
        let pb = self.net_b.predict_proba(x)?;
        let data = pa.data().iter().zip(pb.data()).map(|(a, b)| 0.5 * (a + b)).collect();
        Tensor::new(pa.shape().to_vec(), data)
    }
}
