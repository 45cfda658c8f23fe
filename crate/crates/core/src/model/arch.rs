use std::fmt;

use crate::error::{config_err, Result};

/// One layer of a fully convolutional stack. There is deliberately no dense
/// variant: an FCN cannot express one.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm,
    /// Leaky rectifier `max(x, αx)`; `alpha = 0` is a ReLU.
    Activation { alpha: f64 },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn maxpool(kernel: usize, stride: usize) -> Self {
        LayerSpec::MaxPool {
            kernel,
            stride,
            padding: 0,
        }
    }

    pub fn lrelu(alpha: f64) -> Self {
        LayerSpec::Activation { alpha }
    }

    /// `(kernel, stride, padding)`; identity geometry for pointwise layers.
    pub fn geometry(&self) -> (usize, usize, usize) {
        match *self {
            LayerSpec::Conv {
                kernel,
                stride,
                padding,
                ..
            }
            | LayerSpec::MaxPool {
                kernel,
                stride,
                padding,
            } => (kernel, stride, padding),
            LayerSpec::BatchNorm | LayerSpec::Activation { .. } => (1, 1, 0),
        }
    }

    pub fn is_spatial(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::MaxPool { .. })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(
                f,
                "conv in={in_channels} out={out_channels} k={kernel} s={stride} p={padding}"
            ),
            LayerSpec::MaxPool {
                kernel,
                stride,
                padding,
            } => write!(f, "maxpool k={kernel} s={stride} p={padding}"),
            LayerSpec::BatchNorm => write!(f, "bn"),
            LayerSpec::Activation { alpha } => write!(f, "lrelu a={alpha}"),
        }
    }
}

/// Channel count and spatial extent of the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }
}

/// Validated layer stack ending in a single-channel convolution whose bias is
/// the hypersphere center.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    layers: Vec<LayerSpec>,
    input: InputShape,
}

fn spatial_out(extent: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    if k == 0 || s == 0 || k > extent + 2 * p {
        None
    } else {
        Some((extent + 2 * p - k) / s + 1)
    }
}

impl ArchitectureSpec {
    pub fn new(layers: Vec<LayerSpec>, input: InputShape) -> Result<Self> {
        let spec = Self { layers, input };
        spec.validate()?;
        Ok(spec)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    /// Same layers, different input extent (channels are fixed by the stack).
    pub fn with_input_size(&self, height: usize, width: usize) -> Result<Self> {
        Self::new(
            self.layers.clone(),
            InputShape::new(self.input.channels, height, width),
        )
    }

    fn validate(&self) -> Result<()> {
        if self.input.channels == 0 || self.input.height == 0 || self.input.width == 0 {
            return Err(config_err!("input shape {:?} has a zero extent", self.input));
        }
        let mut channels = self.input.channels;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => {
                    if in_channels != channels {
                        return Err(config_err!(
                            "layer {i}: conv expects {in_channels} channels but receives {channels}"
                        ));
                    }
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(config_err!("layer {i}: conv extents must be positive"));
                    }
                    channels = out_channels;
                }
                LayerSpec::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => {
                    if kernel == 0 || stride == 0 {
                        return Err(config_err!("layer {i}: pool extents must be positive"));
                    }
                    if 2 * padding > kernel {
                        return Err(config_err!("layer {i}: pool padding exceeds half the window"));
                    }
                }
                LayerSpec::Activation { alpha } => {
                    if !(0.0..1.0).contains(&alpha) {
                        return Err(config_err!("layer {i}: activation slope {alpha} outside [0, 1)"));
                    }
                }
                LayerSpec::BatchNorm => {}
            }
        }
        match self.layers.last() {
            Some(LayerSpec::Conv { out_channels: 1, .. }) => {}
            Some(LayerSpec::Conv { out_channels, .. }) => {
                return Err(config_err!(
                    "final conv must produce 1 channel, produces {out_channels}"
                ))
            }
            _ => {
                return Err(config_err!(
                    "architecture must end with a 1-channel conv (its bias is the center)"
                ))
            }
        }
        self.output_size()?;
        Ok(())
    }

    /// Spatial extent `(u, v)` of the final feature map.
    pub fn output_size(&self) -> Result<(usize, usize)> {
        self.output_size_for(self.input.height, self.input.width)
    }

    pub fn output_size_for(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let (mut h, mut w) = (height, width);
        for (i, layer) in self.layers.iter().enumerate() {
            if !layer.is_spatial() {
                continue;
            }
            let (k, s, p) = layer.geometry();
            match (spatial_out(h, k, s, p), spatial_out(w, k, s, p)) {
                (Some(nh), Some(nw)) => (h, w) = (nh, nw),
                _ => {
                    return Err(config_err!(
                        "layer {i} ({layer}) shrinks the {h}x{w} feature map below 1x1"
                    ))
                }
            }
        }
        Ok((h, w))
    }

    pub fn parameter_count(&self) -> usize {
        let mut channels = self.input.channels;
        let mut total = 0;
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    total += out_channels * in_channels * kernel * kernel + out_channels;
                    channels = out_channels;
                }
                LayerSpec::BatchNorm => total += 2 * channels,
                _ => {}
            }
        }
        total
    }

    /// Parses the line-oriented architecture format:
    ///
    /// ```text
    /// # comment
    /// input c=3 h=32 w=32
    /// conv in=3 out=32 k=3 s=1 p=1
    /// bn
    /// lrelu a=0.01
    /// maxpool k=2 s=2
    /// conv in=32 out=1 k=1
    /// ```
    ///
    /// The `input` line may be omitted when `fallback` supplies the shape.
    pub fn parse(text: &str, fallback: Option<InputShape>) -> Result<Self> {
        let (layers, input) = Self::parse_parts(text)?;
        let input = input
            .or(fallback)
            .ok_or_else(|| config_err!("architecture has no 'input' line and no input shape was given"))?;
        Self::new(layers, input)
    }

    /// Layers and the optional `input` line, without cross-layer validation.
    pub fn parse_parts(text: &str) -> Result<(Vec<LayerSpec>, Option<InputShape>)> {
        let mut layers = Vec::new();
        let mut input = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let kind = parts.next().unwrap().to_ascii_lowercase();
            let mut kv = Vec::new();
            for p in parts {
                let (k, v) = p
                    .split_once('=')
                    .ok_or_else(|| config_err!("line {}: expected key=value, got '{p}'", lineno + 1))?;
                kv.push((k.to_ascii_lowercase(), v.to_string()));
            }
            let ctx = LineCtx {
                lineno: lineno + 1,
                kv,
            };
            match kind.as_str() {
                "input" => {
                    input = Some(InputShape::new(ctx.int("c", None)?, ctx.int("h", None)?, ctx.int("w", None)?));
                    ctx.reject_unknown(&["c", "h", "w"])?;
                }
                "conv" => {
                    let k = ctx.int("k", None)?;
                    layers.push(LayerSpec::Conv {
                        in_channels: ctx.int("in", None)?,
                        out_channels: ctx.int("out", None)?,
                        kernel: k,
                        stride: ctx.int("s", Some(1))?,
                        padding: ctx.int("p", Some(0))?,
                    });
                    ctx.reject_unknown(&["in", "out", "k", "s", "p"])?;
                }
                "maxpool" | "pool" => {
                    let k = ctx.int("k", None)?;
                    layers.push(LayerSpec::MaxPool {
                        kernel: k,
                        stride: ctx.int("s", Some(k))?,
                        padding: ctx.int("p", Some(0))?,
                    });
                    ctx.reject_unknown(&["k", "s", "p"])?;
                }
                "bn" | "batchnorm" => {
                    ctx.reject_unknown(&[])?;
                    layers.push(LayerSpec::BatchNorm);
                }
                "relu" => {
                    ctx.reject_unknown(&[])?;
                    layers.push(LayerSpec::Activation { alpha: 0.0 });
                }
                "lrelu" | "leaky_relu" => {
                    let alpha = match ctx.get("a") {
                        Some(v) => v
                            .parse::<f64>()
                            .map_err(|_| config_err!("line {}: bad slope '{v}'", ctx.lineno))?,
                        None => 0.01,
                    };
                    ctx.reject_unknown(&["a"])?;
                    layers.push(LayerSpec::Activation { alpha });
                }
                "dense" | "linear" | "fc" | "fully_connected" => {
                    return Err(config_err!(
                        "line {}: dense layers are not allowed in a fully convolutional network",
                        ctx.lineno
                    ))
                }
                other => {
                    return Err(config_err!("line {}: unknown layer kind '{other}'", ctx.lineno))
                }
            }
        }
        Ok((layers, input))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "input c={} h={} w={}\n",
            self.input.channels, self.input.height, self.input.width
        );
        for l in &self.layers {
            out.push_str(&l.to_string());
            out.push('\n');
        }
        out
    }
}

struct LineCtx {
    lineno: usize,
    kv: Vec<(String, String)>,
}

impl LineCtx {
    fn get(&self, key: &str) -> Option<&str> {
        self.kv.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn int(&self, key: &str, default: Option<usize>) -> Result<usize> {
        match (self.get(key), default) {
            (Some(v), _) => v
                .parse()
                .map_err(|_| config_err!("line {}: '{key}' must be a non-negative integer, got '{v}'", self.lineno)),
            (None, Some(d)) => Ok(d),
            (None, None) => Err(config_err!("line {}: missing '{key}='", self.lineno)),
        }
    }

    fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        match self.kv.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
            Some((k, _)) => Err(config_err!("line {}: unknown key '{k}'", self.lineno)),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
# tiny net
input c=3 h=16 w=16
conv in=3 out=4 k=3 s=1 p=1
bn
lrelu a=0.1
maxpool k=2 s=2
conv in=4 out=1 k=1
";

    #[test]
    fn parse_and_print_roundtrip() {
        let spec = ArchitectureSpec::parse(SMALL, None).unwrap();
        assert_eq!(spec.layers().len(), 5);
        assert_eq!(spec.output_size().unwrap(), (8, 8));
        let again = ArchitectureSpec::parse(&spec.to_text(), None).unwrap();
        assert_eq!(spec, again);
        assert_eq!(spec.parameter_count(), 4 * 27 + 4 + 8 + 4 + 1);
    }

    #[test]
    fn dense_layer_is_rejected() {
        let text = "input c=1 h=8 w=8\nconv in=1 out=4 k=3\ndense in=144 out=1\n";
        let err = ArchitectureSpec::parse(text, None).unwrap_err();
        assert!(err.to_string().contains("dense"));
    }

    #[test]
    fn final_layer_must_be_single_channel_conv() {
        let input = InputShape::new(1, 8, 8);
        assert!(ArchitectureSpec::new(vec![LayerSpec::conv(1, 2, 3, 1, 1)], input).is_err());
        assert!(ArchitectureSpec::new(
            vec![LayerSpec::conv(1, 1, 3, 1, 1), LayerSpec::lrelu(0.0)],
            input
        )
        .is_err());
        assert!(ArchitectureSpec::new(vec![LayerSpec::conv(1, 1, 3, 1, 1)], input).is_ok());
    }

    #[test]
    fn pooling_below_one_pixel_is_rejected() {
        let layers = vec![
            LayerSpec::maxpool(2, 2),
            LayerSpec::maxpool(2, 2),
            LayerSpec::maxpool(2, 2),
            LayerSpec::conv(1, 1, 1, 1, 0),
        ];
        assert!(ArchitectureSpec::new(layers.clone(), InputShape::new(1, 8, 8)).is_ok());
        assert!(ArchitectureSpec::new(layers, InputShape::new(1, 4, 4)).is_err());
    }

    #[test]
    fn channel_chain_is_checked() {
        let text = "input c=3 h=8 w=8\nconv in=1 out=1 k=3\n";
        assert!(ArchitectureSpec::parse(text, None).is_err());
    }

    #[test]
    fn unknown_keys_and_kinds() {
        assert!(ArchitectureSpec::parse("input c=1 h=4 w=4\nconv in=1 out=1 k=1 q=3\n", None).is_err());
        assert!(ArchitectureSpec::parse("input c=1 h=4 w=4\nupsample\n", None).is_err());
    }

    #[test]
    fn fallback_input_shape() {
        let text = "conv in=1 out=1 k=3 s=1 p=1\n";
        assert!(ArchitectureSpec::parse(text, None).is_err());
        let spec = ArchitectureSpec::parse(text, Some(InputShape::new(1, 5, 5))).unwrap();
        assert_eq!(spec.output_size().unwrap(), (5, 5));
    }
}
