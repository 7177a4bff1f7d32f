//! Architecture templates.
//!
//! A template is a topologically ordered list of layers referencing earlier
//! layers by index, plus the named parameter shapes it consumes. Both the
//! graph executor and external reference interpreters walk the same list.

use crate::tensor::PoolKind;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// The `[B, C, H, W]` pixel input in `[0, 1]`.
    Input,
    /// Per-channel standardisation with the model's constants.
    Normalize {
        src: usize,
    },
    Conv {
        src: usize,
        weight: String,
        bias: String,
        stride: usize,
        padding: usize,
    },
    Relu {
        src: usize,
    },
    Pool {
        src: usize,
        kind: PoolKind,
        window: usize,
        stride: usize,
    },
    /// Average over the full spatial extent, giving `[B, C, 1, 1]`.
    GlobalAvgPool {
        src: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    /// Channel-axis concatenation.
    Concat {
        a: usize,
        b: usize,
    },
    Flatten {
        src: usize,
    },
    Dense {
        src: usize,
        weight: String,
        bias: String,
    },
}

impl Layer {
    pub fn sources(&self) -> Vec<usize> {
        match self {
            Layer::Input => vec![],
            Layer::Normalize { src }
            | Layer::Conv { src, .. }
            | Layer::Relu { src }
            | Layer::Pool { src, .. }
            | Layer::GlobalAvgPool { src }
            | Layer::Flatten { src }
            | Layer::Dense { src, .. } => vec![*src],
            Layer::Add { a, b } | Layer::Concat { a, b } => vec![*a, *b],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Fan-in used for initialisation; zero marks a bias.
    pub fan_in: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub layers: Vec<Layer>,
    pub params: Vec<ParamSpec>,
}

impl Template {
    pub fn count(&self, pred: impl Fn(&Layer) -> bool) -> usize {
        self.layers.iter().filter(|l| pred(l)).count()
    }

    pub fn add_skips(&self) -> usize {
        self.count(|l| matches!(l, Layer::Add { .. }))
    }

    pub fn concats(&self) -> usize {
        self.count(|l| matches!(l, Layer::Concat { .. }))
    }

    /// Concatenations where one operand is computed from the other, i.e. the
    /// input is carried forward next to the features derived from it.
    pub fn concat_skips(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| match l {
                Layer::Concat { a, b } => self.depends_on(*b, *a) || self.depends_on(*a, *b),
                _ => false,
            })
            .count()
    }

    /// Largest number of convolutions reading the same tensor: 3+ means
    /// parallel multi-branch blocks.
    pub fn max_conv_fanout(&self) -> usize {
        let mut counts = vec![0usize; self.layers.len()];
        for l in &self.layers {
            if let Layer::Conv { src, .. } = l {
                counts[*src] += 1;
            }
        }
        counts.into_iter().max().unwrap_or(0)
    }

    fn depends_on(&self, node: usize, ancestor: usize) -> bool {
        if node == ancestor {
            return true;
        }
        self.layers[node]
            .sources()
            .into_iter()
            .any(|s| s >= ancestor && self.depends_on(s, ancestor))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}

/// Incremental template construction tracking channel counts.
pub(crate) struct Builder {
    layers: Vec<Layer>,
    channels: Vec<usize>,
    params: Vec<ParamSpec>,
}

impl Builder {
    pub fn new(in_channels: usize) -> Self {
        Self {
            layers: vec![Layer::Input],
            channels: vec![in_channels],
            params: Vec::new(),
        }
    }

    fn push(&mut self, layer: Layer, channels: usize) -> usize {
        self.layers.push(layer);
        self.channels.push(channels);
        self.layers.len() - 1
    }

    pub fn normalize(&mut self, src: usize) -> usize {
        let c = self.channels[src];
        self.push(Layer::Normalize { src }, c)
    }

    pub fn conv(&mut self, name: &str, src: usize, out: usize, k: usize, stride: usize) -> usize {
        let c_in = self.channels[src];
        let weight = format!("{name}.w");
        let bias = format!("{name}.b");
        self.params.push(ParamSpec {
            name: weight.clone(),
            shape: vec![out, c_in, k, k],
            fan_in: c_in * k * k,
        });
        self.params.push(ParamSpec {
            name: bias.clone(),
            shape: vec![out],
            fan_in: 0,
        });
        self.push(
            Layer::Conv {
                src,
                weight,
                bias,
                stride,
                padding: k / 2,
            },
            out,
        )
    }

    pub fn relu(&mut self, src: usize) -> usize {
        let c = self.channels[src];
        self.push(Layer::Relu { src }, c)
    }

    /// conv followed by relu.
    pub fn conv_relu(&mut self, name: &str, src: usize, out: usize, k: usize, stride: usize) -> usize {
        let c = self.conv(name, src, out, k, stride);
        self.relu(c)
    }

    pub fn pool(&mut self, src: usize, kind: PoolKind, window: usize) -> usize {
        let c = self.channels[src];
        self.push(
            Layer::Pool {
                src,
                kind,
                window,
                stride: window,
            },
            c,
        )
    }

    pub fn add(&mut self, a: usize, b: usize) -> usize {
        debug_assert_eq!(self.channels[a], self.channels[b]);
        let c = self.channels[a];
        self.push(Layer::Add { a, b }, c)
    }

    pub fn concat(&mut self, a: usize, b: usize) -> usize {
        let c = self.channels[a] + self.channels[b];
        self.push(Layer::Concat { a, b }, c)
    }

    pub fn channels(&self, node: usize) -> usize {
        self.channels[node]
    }

    /// Global average pool, flatten and a linear classifier.
    pub fn head(mut self, src: usize, num_classes: usize) -> Template {
        let c = self.channels[src];
        let gap = self.push(Layer::GlobalAvgPool { src }, c);
        let flat = self.push(Layer::Flatten { src: gap }, c);
        self.params.push(ParamSpec {
            name: "fc.w".into(),
            shape: vec![num_classes, c],
            fan_in: c,
        });
        self.params.push(ParamSpec {
            name: "fc.b".into(),
            shape: vec![num_classes],
            fan_in: 0,
        });
        self.push(
            Layer::Dense {
                src: flat,
                weight: "fc.w".into(),
                bias: "fc.b".into(),
            },
            num_classes,
        );
        Template {
            layers: self.layers,
            params: self.params,
        }
    }
}

/// Plain conv stacks.
pub(crate) fn mini_vgg(in_channels: usize, num_classes: usize) -> Template {
    let mut b = Builder::new(in_channels);
    let mut x = b.normalize(0);
    for (stage, width) in [16, 32, 64].into_iter().enumerate() {
        x = b.conv_relu(&format!("s{stage}.c0"), x, width, 3, 1);
        x = b.conv_relu(&format!("s{stage}.c1"), x, width, 3, 1);
        x = b.pool(x, PoolKind::Max, 2);
    }
    b.head(x, num_classes)
}

/// Residual blocks with identity add-skips and strided downsampling.
pub(crate) fn mini_res(in_channels: usize, num_classes: usize) -> Template {
    let mut b = Builder::new(in_channels);
    let n = b.normalize(0);
    let mut x = b.conv_relu("stem", n, 16, 3, 1);
    for (stage, width) in [16, 32, 64].into_iter().enumerate() {
        if stage > 0 {
            x = b.conv_relu(&format!("down{stage}"), x, width, 3, 2);
        }
        let h = b.conv_relu(&format!("b{stage}.c0"), x, width, 3, 1);
        let h = b.conv(&format!("b{stage}.c1"), h, width, 3, 1);
        let sum = b.add(x, h);
        x = b.relu(sum);
    }
    b.head(x, num_classes)
}

/// Dense blocks: every layer's output is concatenated onto its input.
pub(crate) fn mini_dense(in_channels: usize, num_classes: usize) -> Template {
    const GROWTH: usize = 12;
    let mut b = Builder::new(in_channels);
    let n = b.normalize(0);
    let stem = b.conv_relu("stem", n, 24, 3, 1);
    let mut x = b.pool(stem, PoolKind::Avg, 2);
    for (block, squeeze) in [(0usize, 48usize), (1, 64)] {
        for layer in 0..3 {
            let h = b.conv_relu(&format!("d{block}.l{layer}"), x, GROWTH, 3, 1);
            x = b.concat(x, h);
        }
        x = b.conv_relu(&format!("t{block}"), x, squeeze, 1, 1);
        if block == 0 {
            x = b.pool(x, PoolKind::Avg, 2);
        }
    }
    b.head(x, num_classes)
}

/// Inception-style blocks with parallel 1x1 / 3x3 / 5x5 branches.
pub(crate) fn mini_incep(in_channels: usize, num_classes: usize) -> Template {
    let mut b = Builder::new(in_channels);
    let n = b.normalize(0);
    let stem = b.conv_relu("stem", n, 32, 3, 1);
    let mut x = b.pool(stem, PoolKind::Max, 2);
    for (block, (w1, r3, w3, r5, w5)) in [(16, 16, 24, 8, 8), (32, 24, 48, 8, 16)].into_iter().enumerate() {
        let p = format!("i{block}");
        let b1 = b.conv_relu(&format!("{p}.b1"), x, w1, 1, 1);
        let b2 = b.conv_relu(&format!("{p}.b3r"), x, r3, 1, 1);
        let b2 = b.conv_relu(&format!("{p}.b3"), b2, w3, 3, 1);
        let b3 = b.conv_relu(&format!("{p}.b5r"), x, r5, 1, 1);
        let b3 = b.conv_relu(&format!("{p}.b5"), b3, w5, 5, 1);
        let cat = b.concat(b1, b2);
        x = b.concat(cat, b3);
        if block == 0 {
            x = b.pool(x, PoolKind::Max, 2);
        }
    }
    debug_assert!(b.channels(x) > 0);
    b.head(x, num_classes)
}
