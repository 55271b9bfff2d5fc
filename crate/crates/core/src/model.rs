//! Model structure: layer descriptors, shape validation, seeded
//! initialization, and checkpoint I/O.
//!
//! The numeric kernels (forward, backward, loss) live in [`crate::autodiff`];
//! this module owns everything about what a model *is*. Models are immutable
//! from the caller's perspective — only the optimizer (in-crate) writes to
//! parameters.
//!
//! Checkpoint format (see `save`/`load`):
//!
//! ```text
//! MBNET1\n
//! input <C> <H> <W> classes <K> layers <L>\n
//! <one line per layer: conv2d/relu/maxpool/dense + dimensions>\n
//! <little-endian f32 parameter blob, declaration order>
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d {
        kh: usize,
        kw: usize,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        pad: usize,
        /// [out_ch, in_ch, kh, kw]
        weight: Tensor,
        /// [out_ch]
        bias: Tensor,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Dense {
        input: usize,
        output: usize,
        /// [output, input]
        weight: Tensor,
        /// [output]
        bias: Tensor,
    },
}

impl Layer {
    pub(crate) fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Dense { .. } => "dense",
        }
    }

    /// Number of parameters (weights + biases) in this layer.
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias, .. } => {
                weight.len() + bias.len()
            }
            _ => 0,
        }
    }
}

/// Activation shape flowing between layers: channel-height-width until the
/// first Dense flattens it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Shape {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    pub(crate) fn flat_len(&self) -> usize {
        match *self {
            Shape::Chw(c, h, w) => c * h * w,
            Shape::Flat(n) => n,
        }
    }
}

fn conv_out(in_dim: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = in_dim + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Walks the layer chain from `input_shape`, returning the activation shape
/// after every layer. Errors name the offending layer.
pub(crate) fn shape_chain(layers: &[Layer], input_shape: [usize; 3]) -> Result<Vec<Shape>> {
    let [c0, h0, w0] = input_shape;
    if c0 == 0 || h0 == 0 || w0 == 0 {
        return Err(Error::invalid_param(
            "input_shape",
            format!("{input_shape:?} has a zero dimension"),
        ));
    }
    let mut shape = Shape::Chw(c0, h0, w0);
    let mut out = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let at = |expected: String, actual: String| {
            Error::shape(format!("layer {i} ({})", layer.kind()), expected, actual)
        };
        shape = match layer {
            Layer::Conv2d {
                kh,
                kw,
                in_ch,
                out_ch,
                stride,
                pad,
                weight,
                bias,
            } => {
                if *kh == 0 || *kw == 0 || *stride == 0 || *in_ch == 0 || *out_ch == 0 {
                    return Err(Error::invalid_param(
                        "conv2d",
                        format!("layer {i}: zero kernel/stride/channel dimension"),
                    ));
                }
                if weight.shape() != [*out_ch, *in_ch, *kh, *kw] {
                    return Err(at(
                        format!("weight [{out_ch}, {in_ch}, {kh}, {kw}]"),
                        format!("{:?}", weight.shape()),
                    ));
                }
                if bias.shape() != [*out_ch] {
                    return Err(at(format!("bias [{out_ch}]"), format!("{:?}", bias.shape())));
                }
                let Shape::Chw(c, h, w) = shape else {
                    return Err(at("image input".into(), format!("{shape:?}")));
                };
                if c != *in_ch {
                    return Err(at(format!("{in_ch} input channels"), format!("{c}")));
                }
                let (oh, ow) = match (conv_out(h, *kh, *stride, *pad), conv_out(w, *kw, *stride, *pad)) {
                    (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
                    _ => {
                        return Err(at(
                            format!("kernel {kh}x{kw} to fit {h}x{w} with pad {pad}"),
                            "empty output".into(),
                        ))
                    }
                };
                Shape::Chw(*out_ch, oh, ow)
            }
            Layer::Relu => shape,
            Layer::MaxPool { window, stride } => {
                if *window == 0 || *stride == 0 {
                    return Err(Error::invalid_param(
                        "maxpool",
                        format!("layer {i}: zero window or stride"),
                    ));
                }
                let Shape::Chw(c, h, w) = shape else {
                    return Err(at("image input".into(), format!("{shape:?}")));
                };
                if h < *window || w < *window {
                    return Err(at(
                        format!("window {window} to fit {h}x{w}"),
                        "empty output".into(),
                    ));
                }
                Shape::Chw(c, (h - window) / stride + 1, (w - window) / stride + 1)
            }
            Layer::Dense {
                input,
                output,
                weight,
                bias,
            } => {
                if *input == 0 || *output == 0 {
                    return Err(Error::invalid_param(
                        "dense",
                        format!("layer {i}: zero input or output width"),
                    ));
                }
                if weight.shape() != [*output, *input] {
                    return Err(at(
                        format!("weight [{output}, {input}]"),
                        format!("{:?}", weight.shape()),
                    ));
                }
                if bias.shape() != [*output] {
                    return Err(at(format!("bias [{output}]"), format!("{:?}", bias.shape())));
                }
                if shape.flat_len() != *input {
                    return Err(at(
                        format!("{input} inputs"),
                        format!("{} (= flattened {shape:?})", shape.flat_len()),
                    ));
                }
                Shape::Flat(*output)
            }
        };
        out.push(shape);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    input_shape: [usize; 3],
    classes: usize,
}

impl Model {
    /// Validates the whole chain: parameter tensor shapes, layer-to-layer
    /// compatibility, and that the final activation flattens to exactly
    /// `classes` logits.
    pub fn new(layers: Vec<Layer>, input_shape: [usize; 3], classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid_param(
                "classes",
                format!("{classes} (need >= 2)"),
            ));
        }
        if layers.is_empty() {
            return Err(Error::invalid_param("layers", "empty layer list"));
        }
        let shapes = shape_chain(&layers, input_shape)?;
        let last = shapes.last().expect("non-empty");
        if last.flat_len() != classes {
            return Err(Error::shape(
                "Model::new",
                format!("{classes} logits"),
                format!("{} (= flattened {last:?})", last.flat_len()),
            ));
        }
        Ok(Model {
            layers,
            input_shape,
            classes,
        })
    }

    /// The default architecture: three 3x3 conv blocks with two 2x2 pools,
    /// then Dense->64, ReLU, Dense->classes. Weights are Glorot-uniform from
    /// a ChaCha8 stream seeded with `seed`; biases start at zero.
    pub fn small_vgg(input_shape: [usize; 3], classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c, _, _] = input_shape;
        let mut layers = Vec::new();
        let mut shape = Shape::Chw(input_shape[0], input_shape[1], input_shape[2]);

        let push_conv = |layers: &mut Vec<Layer>,
                             shape: &mut Shape,
                             in_ch: usize,
                             out_ch: usize,
                             rng: &mut ChaCha8Rng|
         -> Result<()> {
            let layer = Layer::Conv2d {
                kh: 3,
                kw: 3,
                in_ch,
                out_ch,
                stride: 1,
                pad: 1,
                weight: glorot(&[out_ch, in_ch, 3, 3], in_ch * 9, out_ch * 9, rng)?,
                bias: Tensor::zeros(&[out_ch])?,
            };
            let Shape::Chw(_, h, w) = *shape else {
                unreachable!("convs precede the dense head");
            };
            *shape = Shape::Chw(out_ch, h, w);
            layers.push(layer);
            layers.push(Layer::Relu);
            Ok(())
        };

        push_conv(&mut layers, &mut shape, c, 16, &mut rng)?;
        push_conv(&mut layers, &mut shape, 16, 16, &mut rng)?;
        layers.push(Layer::MaxPool { window: 2, stride: 2 });
        shape = pool_shape(shape, 2, 2)?;
        push_conv(&mut layers, &mut shape, 16, 32, &mut rng)?;
        layers.push(Layer::MaxPool { window: 2, stride: 2 });
        shape = pool_shape(shape, 2, 2)?;

        let flat = shape.flat_len();
        layers.push(Layer::Dense {
            input: flat,
            output: 64,
            weight: glorot(&[64, flat], flat, 64, &mut rng)?,
            bias: Tensor::zeros(&[64])?,
        });
        layers.push(Layer::Relu);
        layers.push(Layer::Dense {
            input: 64,
            output: classes,
            weight: glorot(&[classes, 64], 64, classes, &mut rng)?,
            bias: Tensor::zeros(&[classes])?,
        });
        Model::new(layers, input_shape, classes)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub(crate) fn shapes(&self) -> Vec<Shape> {
        shape_chain(&self.layers, self.input_shape).expect("validated at construction")
    }

    /// Runs the batch through the network and returns [N, classes] logits.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        crate::autodiff::forward(self, batch)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(b"MBNET1\n");
        let [c, h, w] = self.input_shape;
        writeln!(
            out,
            "input {c} {h} {w} classes {} layers {}",
            self.classes,
            self.layers.len()
        )
        .expect("write to Vec cannot fail");
        for layer in &self.layers {
            match layer {
                Layer::Conv2d {
                    kh,
                    kw,
                    in_ch,
                    out_ch,
                    stride,
                    pad,
                    ..
                } => writeln!(out, "conv2d {kh} {kw} {in_ch} {out_ch} {stride} {pad}"),
                Layer::Relu => writeln!(out, "relu"),
                Layer::MaxPool { window, stride } => writeln!(out, "maxpool {window} {stride}"),
                Layer::Dense { input, output, .. } => writeln!(out, "dense {input} {output}"),
            }
            .expect("write to Vec cannot fail");
        }
        for layer in &self.layers {
            match layer {
                Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias, .. } => {
                    for &v in weight.data().iter().chain(bias.data()) {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                _ => {}
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let perr = |line: usize, reason: String| Error::parse(path, line, reason);

        let mut pos = 0usize;
        if take_line(&bytes, &mut pos) != Some("MBNET1") {
            return Err(perr(1, "bad magic, expected MBNET1".into()));
        }
        let meta =
            take_line(&bytes, &mut pos).ok_or_else(|| perr(2, "unexpected end of header".into()))?;
        let fields: Vec<&str> = meta.split_whitespace().collect();
        let meta_err = || perr(2, format!("expected `input C H W classes K layers L`, got `{meta}`"));
        if fields.len() != 8 || fields[0] != "input" || fields[4] != "classes" || fields[6] != "layers" {
            return Err(meta_err());
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| meta_err());
        let input_shape = [num(fields[1])?, num(fields[2])?, num(fields[3])?];
        let classes = num(fields[5])?;
        let layer_count = num(fields[7])?;
        if layer_count == 0 || layer_count > 10_000 {
            return Err(perr(2, format!("implausible layer count {layer_count}")));
        }

        let mut descriptors = Vec::with_capacity(layer_count);
        for i in 0..layer_count {
            let line_no = 3 + i;
            let line = take_line(&bytes, &mut pos)
                .ok_or_else(|| perr(line_no, "unexpected end of header".into()))?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            let lerr = |want: &str| perr(line_no, format!("expected `{want}`, got `{line}`"));
            let num = |s: &str, want: &str| s.parse::<usize>().map_err(|_| lerr(want));
            let layer = match parts.first().copied() {
                Some("conv2d") if parts.len() == 7 => {
                    let want = "conv2d kh kw in out stride pad";
                    let d: Vec<usize> = parts[1..]
                        .iter()
                        .copied()
                        .map(|s| num(s, want))
                        .collect::<Result<Vec<usize>>>()?;
                    Layer::Conv2d {
                        kh: d[0],
                        kw: d[1],
                        in_ch: d[2],
                        out_ch: d[3],
                        stride: d[4],
                        pad: d[5],
                        weight: Tensor::zeros(&[d[3].max(1), d[2].max(1), d[0].max(1), d[1].max(1)])?,
                        bias: Tensor::zeros(&[d[3].max(1)])?,
                    }
                }
                Some("relu") if parts.len() == 1 => Layer::Relu,
                Some("maxpool") if parts.len() == 3 => Layer::MaxPool {
                    window: num(parts[1], "maxpool window stride")?,
                    stride: num(parts[2], "maxpool window stride")?,
                },
                Some("dense") if parts.len() == 3 => {
                    let input = num(parts[1], "dense in out")?;
                    let output = num(parts[2], "dense in out")?;
                    Layer::Dense {
                        input,
                        output,
                        weight: Tensor::zeros(&[output.max(1), input.max(1)])?,
                        bias: Tensor::zeros(&[output.max(1)])?,
                    }
                }
                _ => return Err(perr(line_no, format!("unrecognized layer line `{line}`"))),
            };
            descriptors.push(layer);
        }

        let mut layers = descriptors;
        let blob = &bytes[pos..];
        let expected: usize = layers.iter().map(Layer::param_count).sum();
        if blob.len() != expected * 4 {
            return Err(perr(
                0,
                format!(
                    "parameter blob holds {} bytes, expected {} ({} f32 values)",
                    blob.len(),
                    expected * 4,
                    expected
                ),
            ));
        }
        let mut offset = 0;
        for layer in &mut layers {
            if let Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias, .. } = layer {
                for tensor in [weight, bias] {
                    let shape = tensor.shape().to_vec();
                    let n = tensor.len();
                    let mut data = Vec::with_capacity(n);
                    for k in 0..n {
                        let at = offset + k * 4;
                        let v = f32::from_le_bytes(blob[at..at + 4].try_into().expect("sized"));
                        data.push(v as f64);
                    }
                    *tensor = Tensor::new(&shape, data)
                        .map_err(|e| perr(0, format!("parameter blob: {e}")))?;
                    offset += n * 4;
                }
            }
        }
        Model::new(layers, input_shape, classes).map_err(|e| perr(0, format!("invalid model: {e}")))
    }
}

/// Advances past the next `\n`, returning the line without it. `None` at EOF
/// or on non-UTF-8 bytes (header lines are always ASCII).
fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    let rest = bytes.get(*pos..)?;
    let end = rest.iter().position(|&b| b == b'\n')?;
    let text = std::str::from_utf8(&rest[..end]).ok()?;
    *pos += end + 1;
    Some(text)
}

fn pool_shape(shape: Shape, window: usize, stride: usize) -> Result<Shape> {
    let Shape::Chw(c, h, w) = shape else {
        return Err(Error::Invalid("pool after flatten".into()));
    };
    if h < window || w < window {
        return Err(Error::invalid_param(
            "input_shape",
            format!("{h}x{w} too small for the default architecture"),
        ));
    }
    Ok(Shape::Chw(c, (h - window) / stride + 1, (w - window) / stride + 1))
}

/// Uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out)), drawn in row-major
/// declaration order.
fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_layer(input: usize, output: usize, w: Vec<f64>, b: Vec<f64>) -> Layer {
        Layer::Dense {
            input,
            output,
            weight: Tensor::new(&[output, input], w).unwrap(),
            bias: Tensor::new(&[output], b).unwrap(),
        }
    }

    #[test]
    fn shape_chain_on_small_vgg_is_as_documented() {
        let m = Model::small_vgg([3, 32, 32], 2, 0).unwrap();
        let shapes = m.shapes();
        let expect = [
            Shape::Chw(16, 32, 32),
            Shape::Chw(16, 32, 32),
            Shape::Chw(16, 32, 32),
            Shape::Chw(16, 32, 32),
            Shape::Chw(16, 16, 16),
            Shape::Chw(32, 16, 16),
            Shape::Chw(32, 16, 16),
            Shape::Chw(32, 8, 8),
            Shape::Flat(64),
            Shape::Flat(64),
            Shape::Flat(2),
        ];
        assert_eq!(shapes, expect);
        assert_eq!(m.param_count(), 432 + 16 + 2304 + 16 + 4608 + 32 + 2048 * 64 + 64 + 64 * 2 + 2);
    }

    #[test]
    fn small_vgg_init_is_seeded_and_bounded() {
        let a = Model::small_vgg([3, 32, 32], 4, 9).unwrap();
        let b = Model::small_vgg([3, 32, 32], 4, 9).unwrap();
        let c = Model::small_vgg([3, 32, 32], 4, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);

        for layer in a.layers() {
            match layer {
                Layer::Conv2d { weight, bias, in_ch, out_ch, .. } => {
                    let bound = (6.0 / ((in_ch + out_ch) * 9) as f64).sqrt();
                    assert!(weight.data().iter().all(|v| v.abs() < bound));
                    assert!(bias.data().iter().all(|&v| v == 0.0));
                }
                Layer::Dense { weight, bias, input, output } => {
                    let bound = (6.0 / (input + output) as f64).sqrt();
                    assert!(weight.data().iter().all(|v| v.abs() < bound));
                    assert!(bias.data().iter().all(|&v| v == 0.0));
                }
                _ => {}
            }
        }
    }

    #[test]
    fn chain_validation_names_the_offending_layer() {
        let bad = vec![
            Layer::Conv2d {
                kh: 3,
                kw: 3,
                in_ch: 4, // input has 3 channels
                out_ch: 8,
                stride: 1,
                pad: 1,
                weight: Tensor::zeros(&[8, 4, 3, 3]).unwrap(),
                bias: Tensor::zeros(&[8]).unwrap(),
            },
        ];
        let err = Model::new(bad, [3, 8, 8], 2).unwrap_err().to_string();
        assert!(err.contains("layer 0 (conv2d)"), "{err}");

        let bad = vec![
            dense_layer(10, 2, vec![0.0; 20], vec![0.0; 2]), // 3*8*8 = 192 != 10
        ];
        let err = Model::new(bad, [3, 8, 8], 2).unwrap_err().to_string();
        assert!(err.contains("layer 0 (dense)"), "{err}");

        let bad = vec![Layer::MaxPool { window: 9, stride: 1 }];
        let err = Model::new(bad, [3, 8, 8], 2).unwrap_err().to_string();
        assert!(err.contains("layer 0 (maxpool)"), "{err}");
    }

    #[test]
    fn logit_width_must_match_classes() {
        let layers = vec![dense_layer(4, 3, vec![0.0; 12], vec![0.0; 3])];
        assert!(Model::new(layers.clone(), [1, 2, 2], 3).is_ok());
        assert!(Model::new(layers, [1, 2, 2], 2).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mbnet");
        let m = Model::small_vgg([3, 8, 8], 2, 123).unwrap();
        m.save(&path).unwrap();
        let bytes1 = fs::read(&path).unwrap();

        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded.input_shape(), [3, 8, 8]);
        assert_eq!(loaded.classes(), 2);
        assert_eq!(loaded.layers().len(), m.layers().len());

        // Parameters were quantized to f32 by save; saving the loaded model
        // must reproduce the file exactly.
        let path2 = dir.path().join("m2.mbnet");
        loaded.save(&path2).unwrap();
        assert_eq!(bytes1, fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_header_is_human_readable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mbnet");
        Model::small_vgg([3, 8, 8], 5, 0).unwrap().save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let head = std::str::from_utf8(&bytes[..120]).unwrap();
        assert!(head.starts_with("MBNET1\ninput 3 8 8 classes 5 layers 11\nconv2d 3 3 3 16 1 1\n"));
    }

    #[test]
    fn load_rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();

        let bad_magic = dir.path().join("a");
        fs::write(&bad_magic, b"MBNET9\n").unwrap();
        assert!(Model::load(&bad_magic).unwrap_err().to_string().contains("magic"));

        let bad_meta = dir.path().join("b");
        fs::write(&bad_meta, b"MBNET1\ninput 3 8 8\n").unwrap();
        assert!(Model::load(&bad_meta).is_err());

        let path = dir.path().join("c");
        Model::small_vgg([3, 8, 8], 2, 0).unwrap().save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        let truncated = dir.path().join("d");
        fs::write(&truncated, &bytes).unwrap();
        let msg = Model::load(&truncated).unwrap_err().to_string();
        assert!(msg.contains("blob"), "{msg}");

        let mut padded = fs::read(&path).unwrap();
        padded.extend_from_slice(&[0, 0, 0, 0]);
        let trailing = dir.path().join("e");
        fs::write(&trailing, &padded).unwrap();
        assert!(Model::load(&trailing).is_err());
    }
}
