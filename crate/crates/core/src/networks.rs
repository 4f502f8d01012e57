//! The four sub-networks: extractor F, classifier C, discriminator D and
//! metric generator G, as plain multilayer perceptrons.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Graph, Var};
use crate::tensor::Tensor;

const MAGIC: &[u8; 5] = b"MLAD1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::None),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// Hidden widths of each sub-network; input width and class count come
/// from the data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Widths of the extractor layers; the last one is the feature dim.
    pub extractor: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub metric_hidden: Vec<usize>,
    pub metric_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            extractor: vec![64, 32],
            classifier_hidden: vec![32],
            discriminator_hidden: vec![32],
            metric_hidden: vec![32],
            metric_dim: 16,
        }
    }
}

/// Layer lists of all four sub-networks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub extractor: Vec<LayerSpec>,
    pub classifier: Vec<LayerSpec>,
    pub discriminator: Vec<LayerSpec>,
    pub metric: Vec<LayerSpec>,
}

fn chain(input: usize, hidden: &[usize], output: usize, last: Activation) -> Vec<LayerSpec> {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(output);
    let n = dims.len() - 1;
    (0..n)
        .map(|i| LayerSpec {
            in_dim: dims[i],
            out_dim: dims[i + 1],
            activation: if i + 1 == n { last } else { Activation::Relu },
        })
        .collect()
}

impl NetworkSpec {
    pub fn new(input_dim: usize, classes: usize, arch: &Architecture) -> Result<Self> {
        if arch.extractor.is_empty() {
            return Err(Error::usage("extractor needs at least one layer"));
        }
        let feat = *arch.extractor.last().unwrap();
        let extractor = chain(
            input_dim,
            &arch.extractor[..arch.extractor.len() - 1],
            feat,
            Activation::Relu,
        );
        let spec = NetworkSpec {
            extractor,
            classifier: chain(feat, &arch.classifier_hidden, classes, Activation::None),
            discriminator: chain(feat, &arch.discriminator_hidden, 1, Activation::Sigmoid),
            metric: chain(feat, &arch.metric_hidden, arch.metric_dim, Activation::None),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, layers) in self.parts() {
            if layers.is_empty() {
                return Err(Error::usage(format!("{} has no layers", name)));
            }
            for (i, l) in layers.iter().enumerate() {
                if l.in_dim == 0 || l.out_dim == 0 {
                    return Err(Error::usage(format!(
                        "{} layer {} has a zero dimension",
                        name, i
                    )));
                }
                if i > 0 && layers[i - 1].out_dim != l.in_dim {
                    return Err(Error::usage(format!(
                        "{} layer {} expects {} inputs but receives {}",
                        name,
                        i,
                        l.in_dim,
                        layers[i - 1].out_dim
                    )));
                }
            }
        }
        let feat = self.extractor.last().unwrap().out_dim;
        for (name, layers) in &self.parts()[1..] {
            if layers[0].in_dim != feat {
                return Err(Error::usage(format!(
                    "{} takes {} inputs but the extractor emits {}",
                    name, layers[0].in_dim, feat
                )));
            }
        }
        Ok(())
    }

    fn parts(&self) -> [(&'static str, &Vec<LayerSpec>); 4] {
        [
            ("extractor", &self.extractor),
            ("classifier", &self.classifier),
            ("discriminator", &self.discriminator),
            ("metric generator", &self.metric),
        ]
    }

    pub fn input_dim(&self) -> usize {
        self.extractor[0].in_dim
    }

    pub fn classes(&self) -> usize {
        self.classifier.last().unwrap().out_dim
    }
}

/// Weight is `in_dim x out_dim`, bias is `1 x out_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub extractor: Vec<Layer>,
    pub classifier: Vec<Layer>,
    pub discriminator: Vec<Layer>,
    pub metric: Vec<Layer>,
}

/// Glorot-uniform weights and zero biases from a seeded generator.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut build = |layers: &[LayerSpec]| -> Vec<Layer> {
        layers
            .iter()
            .map(|s| {
                let limit = (6.0 / (s.in_dim + s.out_dim) as f64).sqrt();
                let data = (0..s.in_dim * s.out_dim)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Layer {
                    spec: *s,
                    weight: Tensor::new(s.in_dim, s.out_dim, data).expect("sized"),
                    bias: Tensor::zeros(1, s.out_dim),
                }
            })
            .collect()
    };
    Ok(ModelParams {
        extractor: build(&spec.extractor),
        classifier: build(&spec.classifier),
        discriminator: build(&spec.discriminator),
        metric: build(&spec.metric),
    })
}

/// Parameter handles of one layer on a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub extractor: Vec<LayerVars>,
    pub classifier: Vec<LayerVars>,
    pub discriminator: Vec<LayerVars>,
    pub metric: Vec<LayerVars>,
}

impl ModelVars {
    /// Handles in declaration order, matching [`ModelParams::tensors`].
    pub fn all(&self) -> Vec<Var> {
        [
            &self.extractor,
            &self.classifier,
            &self.discriminator,
            &self.metric,
        ]
        .iter()
        .flat_map(|net| net.iter().flat_map(|l| [l.weight, l.bias]))
        .collect()
    }

    /// Adjoints in declaration order.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.all()
            .into_iter()
            .map(|v| g.grad(v).cloned().expect("bound as param"))
            .collect()
    }
}

/// Which sub-network a flattened parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Extractor,
    Classifier,
    Discriminator,
    Metric,
}

impl ModelParams {
    pub fn spec(&self) -> NetworkSpec {
        let specs = |ls: &[Layer]| ls.iter().map(|l| l.spec).collect();
        NetworkSpec {
            extractor: specs(&self.extractor),
            classifier: specs(&self.classifier),
            discriminator: specs(&self.discriminator),
            metric: specs(&self.metric),
        }
    }

    fn nets(&self) -> [(Part, &Vec<Layer>); 4] {
        [
            (Part::Extractor, &self.extractor),
            (Part::Classifier, &self.classifier),
            (Part::Discriminator, &self.discriminator),
            (Part::Metric, &self.metric),
        ]
    }

    /// Every weight and bias in declaration order: F, C, D, G; weight
    /// before bias within a layer.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.nets()
            .into_iter()
            .flat_map(|(_, net)| net.iter().flat_map(|l| [&l.weight, &l.bias]))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        [
            &mut self.extractor,
            &mut self.classifier,
            &mut self.discriminator,
            &mut self.metric,
        ]
        .into_iter()
        .flat_map(|net| net.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]))
        .collect()
    }

    /// Owning sub-network for each entry of [`ModelParams::tensors`].
    pub fn parts(&self) -> Vec<Part> {
        self.nets()
            .into_iter()
            .flat_map(|(p, net)| std::iter::repeat_n(p, net.len() * 2))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Result<ModelVars> {
        Ok(ModelVars {
            extractor: bind_layers(g, &self.extractor)?,
            classifier: bind_layers(g, &self.classifier)?,
            discriminator: bind_layers(g, &self.discriminator)?,
            metric: bind_layers(g, &self.metric)?,
        })
    }

    /// Raw extractor features F(x).
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, |g, vars, input| forward_mlp(g, &vars.extractor, input))
    }

    /// Metric-space embeddings G(F(x)).
    pub fn metric_features(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, |g, vars, input| {
            let f = forward_mlp(g, &vars.extractor, input)?;
            forward_mlp(g, &vars.metric, f)
        })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, |g, vars, input| {
            let f = forward_mlp(g, &vars.extractor, input)?;
            forward_mlp(g, &vars.classifier, f)
        })
    }

    /// Softmax class probabilities C(F(x)).
    pub fn predict_probs(&self, x: &Tensor) -> Result<Tensor> {
        Ok(softmax_rows(&self.logits(x)?))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    fn run(
        &self,
        x: &Tensor,
        f: impl FnOnce(&mut Graph, &ModelVars, Var) -> Result<Var>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = bind_constants(&mut g, self)?;
        let input = g.constant(x.clone())?;
        let out = f(&mut g, &vars, input)?;
        Ok(g.value(out).clone())
    }

    /// Writes the flat binary snapshot: `MLAD1`, the layer table, then
    /// every value as a little-endian f64 in declaration order.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        let nets = self.nets();
        w.write_all(&(nets.len() as u32).to_le_bytes())?;
        for (_, net) in nets {
            w.write_all(&(net.len() as u32).to_le_bytes())?;
            for l in net {
                w.write_all(&(l.spec.in_dim as u32).to_le_bytes())?;
                w.write_all(&(l.spec.out_dim as u32).to_le_bytes())?;
                w.write_all(&[l.spec.activation.code()])?;
            }
        }
        for t in self.tensors() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |msg: &str| Error::Data(format!("parameter snapshot: {}", msg));
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32_buf = [0u8; 4];
        let mut read_u32 = |r: &mut dyn Read| -> Result<usize> {
            r.read_exact(&mut u32_buf)?;
            Ok(u32::from_le_bytes(u32_buf) as usize)
        };
        if read_u32(&mut r)? != 4 {
            return Err(bad("expected four sub-networks"));
        }
        let mut nets: Vec<Vec<LayerSpec>> = Vec::with_capacity(4);
        for _ in 0..4 {
            let n = read_u32(&mut r)?;
            let mut layers = Vec::with_capacity(n);
            for _ in 0..n {
                let in_dim = read_u32(&mut r)?;
                let out_dim = read_u32(&mut r)?;
                let mut code = [0u8; 1];
                r.read_exact(&mut code)?;
                let activation = Activation::from_code(code[0]).ok_or_else(|| bad("activation"))?;
                layers.push(LayerSpec {
                    in_dim,
                    out_dim,
                    activation,
                });
            }
            nets.push(layers);
        }
        let metric = nets.pop().unwrap();
        let discriminator = nets.pop().unwrap();
        let classifier = nets.pop().unwrap();
        let extractor = nets.pop().unwrap();
        let spec = NetworkSpec {
            extractor,
            classifier,
            discriminator,
            metric,
        };
        spec.validate()?;
        let mut params = init_params(&spec, 0)?;
        let mut f64_buf = [0u8; 8];
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                r.read_exact(&mut f64_buf)?;
                *v = f64::from_le_bytes(f64_buf);
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.param_count() * 8 + 64);
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn bind_layers(g: &mut Graph, layers: &[Layer]) -> Result<Vec<LayerVars>> {
    layers
        .iter()
        .map(|l| {
            Ok(LayerVars {
                weight: g.param(l.weight.clone())?,
                bias: g.param(l.bias.clone())?,
                activation: l.spec.activation,
            })
        })
        .collect()
}

fn bind_constants(g: &mut Graph, p: &ModelParams) -> Result<ModelVars> {
    let bind = |g: &mut Graph, layers: &[Layer]| -> Result<Vec<LayerVars>> {
        layers
            .iter()
            .map(|l| {
                Ok(LayerVars {
                    weight: g.constant(l.weight.clone())?,
                    bias: g.constant(l.bias.clone())?,
                    activation: l.spec.activation,
                })
            })
            .collect()
    };
    Ok(ModelVars {
        extractor: bind(g, &p.extractor)?,
        classifier: bind(g, &p.classifier)?,
        discriminator: bind(g, &p.discriminator)?,
        metric: bind(g, &p.metric)?,
    })
}

fn activate(g: &mut Graph, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Sigmoid => g.sigmoid(x),
        Activation::None => Ok(x),
    }
}

fn affine(g: &mut Graph, layer: &LayerVars, x: Var) -> Result<Var> {
    let (cols, in_dim) = (g.value(x).cols(), g.value(layer.weight).rows());
    if cols != in_dim {
        return Err(Error::shape(
            "forward_mlp",
            format!("input has {} columns, layer expects {}", cols, in_dim),
        ));
    }
    let z = g.matmul(x, layer.weight)?;
    g.add_row(z, layer.bias)
}

/// Affine + activation for every layer.
pub fn forward_mlp(g: &mut Graph, layers: &[LayerVars], x: Var) -> Result<Var> {
    let mut h = x;
    for layer in layers {
        let z = affine(g, layer, h)?;
        h = activate(g, z, layer.activation)?;
    }
    Ok(h)
}

/// Same as [`forward_mlp`] but stops before the final activation.
pub fn forward_mlp_logits(g: &mut Graph, layers: &[LayerVars], x: Var) -> Result<Var> {
    let (last, init) = layers
        .split_last()
        .ok_or_else(|| Error::usage("empty layer list"))?;
    let h = forward_mlp(g, init, x)?;
    affine(g, last, h)
}
