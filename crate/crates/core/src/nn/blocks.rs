use super::{BatchNorm2d, Binding, Conv2d, Mode, Scope};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Element, Graph, Var};

/// Parallel 3x3/stride-2 conv and 2x2 max pool, concatenated, then BN and
/// ReLU. The conv supplies `cout - cin` channels, the pool the other `cin`.
#[derive(Clone, Debug)]
pub struct Downsampler {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl Downsampler {
    pub fn new<T: Element>(s: &mut Scope<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        if cout <= cin {
            return Err(Error::invalid(
                "downsampler",
                format!("output channels {cout} must exceed input channels {cin}"),
            ));
        }
        let mut s = s.child(name);
        Ok(Downsampler {
            conv: Conv2d::new(&mut s, "conv", cin, cout - cin, (3, 3), ConvGeometry::new(2, 1), false)?,
            bn: BatchNorm2d::new(&mut s, "bn", cout)?,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &mut Binding<'_, T>, x: Var) -> Result<Var> {
        let c = self.conv.forward(g, b, x)?;
        let p = g.max_pool2d(x)?;
        let cat = g.concat_channels(c, p)?;
        let y = self.bn.forward(g, b, cat)?;
        Ok(g.relu(y))
    }
}

/// Residual block with 3x3 convolutions factorised into 3x1 and 1x3 pairs;
/// the second pair is dilated.
#[derive(Clone, Debug)]
pub struct NonBottleneck1d {
    pub conv3x1_1: Conv2d,
    pub conv1x3_1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv3x1_2: Conv2d,
    pub conv1x3_2: Conv2d,
    pub bn2: BatchNorm2d,
    pub dropout: f64,
}

impl NonBottleneck1d {
    pub fn new<T: Element>(
        s: &mut Scope<'_, T>,
        name: &str,
        channels: usize,
        dilation: usize,
        dropout: f64,
    ) -> Result<Self> {
        if dilation == 0 {
            return Err(Error::invalid("non_bottleneck_1d", "dilation must be at least 1"));
        }
        let mut s = s.child(name);
        let d = dilation;
        let col = ConvGeometry::new(1, 0).with_padding(1, 0);
        let row = ConvGeometry::new(1, 0).with_padding(0, 1);
        let col_d = ConvGeometry::new(1, 0).with_padding(d, 0).with_dilation(d, 1);
        let row_d = ConvGeometry::new(1, 0).with_padding(0, d).with_dilation(1, d);
        let c = channels;
        Ok(NonBottleneck1d {
            conv3x1_1: Conv2d::new(&mut s, "conv3x1_1", c, c, (3, 1), col, true)?,
            conv1x3_1: Conv2d::new(&mut s, "conv1x3_1", c, c, (1, 3), row, false)?,
            bn1: BatchNorm2d::new(&mut s, "bn1", c)?,
            conv3x1_2: Conv2d::new(&mut s, "conv3x1_2", c, c, (3, 1), col_d, true)?,
            conv1x3_2: Conv2d::new(&mut s, "conv1x3_2", c, c, (1, 3), row_d, false)?,
            bn2: BatchNorm2d::new(&mut s, "bn2", c)?,
            dropout,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &mut Binding<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.conv3x1_1.forward(g, b, x)?;
        y = g.relu(y);
        y = self.conv1x3_1.forward(g, b, y)?;
        y = self.bn1.forward(g, b, y)?;
        y = g.relu(y);
        y = self.conv3x1_2.forward(g, b, y)?;
        y = g.relu(y);
        y = self.conv1x3_2.forward(g, b, y)?;
        y = self.bn2.forward(g, b, y)?;
        if b.mode() == Mode::Train && self.dropout > 0.0 {
            let p = self.dropout;
            y = g.dropout2d(y, p, b.rng())?;
        }
        let sum = g.add(y, x)?;
        Ok(g.relu(sum))
    }
}

/// DenseNet block: each layer (BN, ReLU, 3x3 conv) sees the concatenation
/// of the block input and every earlier layer's output.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<(BatchNorm2d, Conv2d)>,
    pub in_channels: usize,
    pub growth: usize,
}

impl DenseBlock {
    pub fn new<T: Element>(
        s: &mut Scope<'_, T>,
        name: &str,
        cin: usize,
        growth: usize,
        layers: usize,
    ) -> Result<Self> {
        let mut s = s.child(name);
        let layers = (0..layers)
            .map(|i| {
                let width = cin + i * growth;
                let mut l = s.child(&format!("layer{i}"));
                Ok((
                    BatchNorm2d::new(&mut l, "bn", width)?,
                    Conv2d::new(&mut l, "conv", width, growth, (3, 3), ConvGeometry::new(1, 1), false)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(DenseBlock {
            layers,
            in_channels: cin,
            growth,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &mut Binding<'_, T>, x: Var) -> Result<Var> {
        let mut feats = x;
        for (bn, conv) in &self.layers {
            let h = bn.forward(g, b, feats)?;
            let h = g.relu(h);
            let h = conv.forward(g, b, h)?;
            feats = g.concat_channels(feats, h)?;
        }
        Ok(feats)
    }
}

/// 1x1 projection, BN and ReLU, followed by a 2x2 average pool.
#[derive(Clone, Debug)]
pub struct Transition {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl Transition {
    pub fn new<T: Element>(s: &mut Scope<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let mut s = s.child(name);
        Ok(Transition {
            conv: Conv2d::new(&mut s, "conv", cin, cout, (1, 1), ConvGeometry::default(), false)?,
            bn: BatchNorm2d::new(&mut s, "bn", cout)?,
        })
    }

    /// The projected activation before pooling.
    pub fn project<T: Element>(&self, g: &mut Graph<T>, b: &mut Binding<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, b, x)?;
        let y = self.bn.forward(g, b, y)?;
        Ok(g.relu(y))
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &mut Binding<'_, T>, x: Var) -> Result<Var> {
        let y = self.project(g, b, x)?;
        g.avg_pool2d(y)
    }
}
