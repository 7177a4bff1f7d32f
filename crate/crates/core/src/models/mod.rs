//! The model zoo: four small, structurally distinct classifiers.
//!
//! | arch         | distinguishing structure                       |
//! |--------------|------------------------------------------------|
//! | `mini_vgg`   | plain conv/relu stacks with max pooling         |
//! | `mini_res`   | residual blocks joined by add-skips             |
//! | `mini_dense` | dense blocks joined by concat-skips             |
//! | `mini_incep` | parallel 1x1 / 3x3 / 5x5 branches, concatenated |
//!
//! Every model standardises its `[0, 1]` input inside the graph, so input
//! gradients are taken w.r.t. raw pixels.

mod arch;
mod train;
mod weights;

pub use arch::{Layer, ParamSpec, Template};
pub use train::{accuracy, train, EpochMetrics, TrainConfig, TrainMetrics};
pub use weights::{decode_weights, encode_weights, load_weights, load_weights_into, save_weights, WEIGHTS_MAGIC};

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, PoolKind, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arch {
    MiniVgg,
    MiniRes,
    MiniDense,
    MiniIncep,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::MiniVgg, Arch::MiniRes, Arch::MiniDense, Arch::MiniIncep];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::MiniVgg => "mini_vgg",
            Arch::MiniRes => "mini_res",
            Arch::MiniDense => "mini_dense",
            Arch::MiniIncep => "mini_incep",
        }
    }

    pub fn template(self, in_channels: usize, num_classes: usize) -> Template {
        match self {
            Arch::MiniVgg => arch::mini_vgg(in_channels, num_classes),
            Arch::MiniRes => arch::mini_res(in_channels, num_classes),
            Arch::MiniDense => arch::mini_dense(in_channels, num_classes),
            Arch::MiniIncep => arch::mini_incep(in_channels, num_classes),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| {
            Error::usage(format!(
                "unknown arch '{s}' (valid: {})",
                Arch::ALL.map(Arch::as_str).join(", ")
            ))
        })
    }
}

/// Standard per-channel statistics for the supported datasets.
pub fn default_normalization(channels: usize) -> (Vec<f32>, Vec<f32>) {
    match channels {
        3 => (vec![0.4914, 0.4822, 0.4465], vec![0.2470, 0.2435, 0.2616]),
        1 => (vec![0.1307], vec![0.3081]),
        c => (vec![0.5; c], vec![0.25; c]),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Arch,
    num_classes: usize,
    template: Template,
    params: IndexMap<String, Tensor>,
    mean: Vec<f32>,
    std: Vec<f32>,
}

/// Build a freshly initialised model for 3-channel input.
pub fn build_model(arch: Arch, num_classes: usize, seed: u64) -> Result<Model> {
    Model::new(arch, 3, num_classes, seed)
}

impl Model {
    /// Fan-in scaled uniform initialisation, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`
    /// for weights and zeros for biases, drawn in template order.
    pub fn new(arch: Arch, in_channels: usize, num_classes: usize, seed: u64) -> Result<Model> {
        if num_classes < 2 {
            return Err(Error::usage("a classifier needs at least two classes"));
        }
        if in_channels == 0 {
            return Err(Error::usage("input must have at least one channel"));
        }
        let template = arch.template(in_channels, num_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        for p in &template.params {
            let n: usize = p.shape.iter().product();
            let data = if p.fan_in == 0 {
                vec![0.0; n]
            } else {
                let bound = (6.0 / p.fan_in as f32).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            params.insert(p.name.clone(), Tensor::new(&p.shape, data)?);
        }
        let (mean, std) = default_normalization(in_channels);
        Ok(Model {
            arch,
            num_classes,
            template,
            params,
            mean,
            std,
        })
    }

    pub(crate) fn from_parts(
        arch: Arch,
        num_classes: usize,
        params: IndexMap<String, Tensor>,
        mean: Vec<f32>,
        std: Vec<f32>,
    ) -> Result<Model> {
        let template = arch.template(mean.len(), num_classes);
        if params.len() != template.params.len() {
            return Err(Error::format(
                "weights",
                format!("{} tensors, {arch} expects {}", params.len(), template.params.len()),
            ));
        }
        for spec in &template.params {
            match params.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::format(
                        "weights",
                        format!("{} has shape {:?}, expected {:?}", spec.name, t.shape(), spec.shape),
                    ))
                }
                None => return Err(Error::format("weights", format!("missing tensor {}", spec.name))),
            }
        }
        if std.len() != mean.len() || std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::format("weights", "invalid normalisation constants"));
        }
        let mut ordered = IndexMap::new();
        for spec in &template.params {
            ordered.insert(spec.name.clone(), params[&spec.name].clone());
        }
        Ok(Model {
            arch,
            num_classes,
            template,
            params: ordered,
            mean,
            std,
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn in_channels(&self) -> usize {
        self.mean.len()
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut IndexMap<String, Tensor> {
        &mut self.params
    }

    pub fn normalization(&self) -> (&[f32], &[f32]) {
        (&self.mean, &self.std)
    }

    pub fn param_count(&self) -> usize {
        self.template.param_count()
    }

    /// Add the model to `graph` on `input` (`[C,H,W]` or `[B,C,H,W]`) and
    /// return the logits node. With `trainable`, weight leaves receive
    /// gradients; the returned map gives each weight's leaf node.
    pub fn forward<'m>(
        &'m self,
        graph: &mut Graph<'m>,
        input: NodeId,
        trainable: bool,
    ) -> Result<(NodeId, Vec<(String, NodeId)>)> {
        let batched = graph.shape(input).len() == 4;
        let mut leaves = Vec::new();
        let mut param = |graph: &mut Graph<'m>, name: &str| -> NodeId {
            let id = graph.param(&self.params[name], trainable);
            leaves.push((name.to_string(), id));
            id
        };
        let mut nodes: Vec<NodeId> = Vec::with_capacity(self.template.layers.len());
        for layer in &self.template.layers {
            let id = match layer {
                Layer::Input => input,
                Layer::Normalize { src } => graph.normalize(nodes[*src], &self.mean, &self.std)?,
                Layer::Conv {
                    src,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let w = param(graph, weight);
                    let b = param(graph, bias);
                    graph.conv2d_with_bias(nodes[*src], w, Some(b), *stride, *padding)?
                }
                Layer::Relu { src } => graph.relu(nodes[*src]),
                Layer::Pool {
                    src,
                    kind,
                    window,
                    stride,
                } => graph.pool2d(nodes[*src], *kind, *window, *stride)?,
                Layer::GlobalAvgPool { src } => {
                    let shape = graph.shape(nodes[*src]).to_vec();
                    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                    if h != w {
                        return Err(Error::shape(format!("global pooling needs square maps, got {h}x{w}")));
                    }
                    graph.pool2d(nodes[*src], PoolKind::Avg, h, 1)?
                }
                Layer::Add { a, b } => graph.add(nodes[*a], nodes[*b])?,
                Layer::Concat { a, b } => graph.concat(nodes[*a], nodes[*b], if batched { 1 } else { 0 })?,
                Layer::Flatten { src } => {
                    let shape = graph.shape(nodes[*src]).to_vec();
                    let target = if batched {
                        vec![shape[0], shape[1..].iter().product()]
                    } else {
                        vec![shape.iter().product()]
                    };
                    graph.reshape(nodes[*src], &target)?
                }
                Layer::Dense { src, weight, bias } => {
                    let w = param(graph, weight);
                    let b = param(graph, bias);
                    graph.dense(nodes[*src], w, Some(b))?
                }
            };
            nodes.push(id);
        }
        let out = *nodes.last().expect("template has layers");
        Ok((out, leaves))
    }

    /// Raw logits for a `[B, C, H, W]` batch, shape `[B, num_classes]`.
    pub fn predict_logits(&self, images: &Tensor) -> Result<Tensor> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != self.in_channels() {
            return Err(Error::shape(format!(
                "{} expects [B,{},H,W] images, got {shape:?}",
                self.arch,
                self.in_channels()
            )));
        }
        let mut graph = Graph::new();
        let x = graph.leaf(images.clone(), false);
        let (out, _) = self.forward(&mut graph, x, false)?;
        Ok(graph.value(out).clone())
    }

    /// Logits for one `[C, H, W]` image.
    pub fn logits(&self, image: &Tensor) -> Result<Vec<f32>> {
        let batch = image
            .clone()
            .reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?;
        Ok(self.predict_logits(&batch)?.into_data())
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(crate::tensor::argmax(&self.logits(image)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::OpKind;

    fn graph_counts(model: &Model) -> (usize, usize) {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 3, 32, 32], 0.5), false);
        model.forward(&mut g, x, false).unwrap();
        (g.count(OpKind::Add), g.count(OpKind::Concat))
    }

    #[test]
    fn same_seed_same_weights() {
        for arch in Arch::ALL {
            let a = build_model(arch, 10, 3).unwrap();
            let b = build_model(arch, 10, 3).unwrap();
            assert_eq!(a.params(), b.params());
            let c = build_model(arch, 10, 4).unwrap();
            assert_ne!(a.params(), c.params());
        }
    }

    #[test]
    fn architectures_are_structurally_distinct() {
        let sig = |arch: Arch| {
            let m = build_model(arch, 10, 0).unwrap();
            let t = m.template();
            (t.add_skips() > 0, t.concat_skips() > 0, t.max_conv_fanout() >= 3)
        };
        assert_eq!(sig(Arch::MiniVgg), (false, false, false));
        assert_eq!(sig(Arch::MiniRes), (true, false, false));
        assert_eq!(sig(Arch::MiniDense), (false, true, false));
        assert_eq!(sig(Arch::MiniIncep), (false, false, true));

        let (adds, _) = graph_counts(&build_model(Arch::MiniRes, 10, 0).unwrap());
        assert!(adds >= 2);
        let (_, concats) = graph_counts(&build_model(Arch::MiniDense, 10, 0).unwrap());
        assert!(concats >= 2);
    }

    #[test]
    fn forward_shapes_and_sizes() {
        let x = Tensor::full(&[2, 3, 32, 32], 0.3);
        for arch in Arch::ALL {
            let m = build_model(arch, 10, 1).unwrap();
            assert!(m.param_count() <= 1_000_000, "{arch}: {}", m.param_count());
            let logits = m.predict_logits(&x).unwrap();
            assert_eq!(logits.shape(), &[2, 10]);
            assert_eq!(logits.data()[..10], logits.data()[10..]);
            let single = m
                .predict_logits(&x.index_axis0(0).reshape(&[1, 3, 32, 32]).unwrap())
                .unwrap();
            assert_eq!(single.shape(), &[1, 10]);
            assert_eq!(single.data(), &logits.data()[..10]);
        }
    }

    #[test]
    fn works_on_single_channel_input() {
        let m = Model::new(Arch::MiniIncep, 1, 10, 0).unwrap();
        let logits = m.predict_logits(&Tensor::full(&[1, 1, 28, 28], 0.2)).unwrap();
        assert_eq!(logits.shape(), &[1, 10]);
        assert!(m.predict_logits(&Tensor::full(&[1, 3, 28, 28], 0.2)).is_err());
    }

    #[test]
    fn unknown_arch_lists_valid_ones() {
        let err = "resnet50".parse::<Arch>().unwrap_err().to_string();
        assert!(err.contains("mini_vgg") && err.contains("mini_incep"));
    }
}
