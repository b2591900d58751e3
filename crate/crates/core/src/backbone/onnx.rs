//! Reader and executor for a subset of the ONNX interchange format.
//!
//! Supported graphs are single-input chains of `Conv`, `Relu` and `MaxPool`
//! nodes on an NCHW float input (as exported from a convolutional feature
//! stack). `Identity` nodes are resolved as aliases. Anything after the
//! last `MaxPool` is dropped, so a full classifier export also works. Only
//! the message fields needed for that are declared; protobuf skips the rest.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView3};
use prost::Message;

use super::conv::{Conv2d, MaxPool2d, Window};
use super::BackboneError;

pub mod proto {
    //! Wire-compatible subsets of the ONNX protobuf messages.

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct ModelProto {
        #[prost(int64, tag = "1")]
        pub ir_version: i64,
        #[prost(string, tag = "2")]
        pub producer_name: String,
        #[prost(message, optional, tag = "7")]
        pub graph: Option<GraphProto>,
        #[prost(message, repeated, tag = "8")]
        pub opset_import: Vec<OperatorSetIdProto>,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct OperatorSetIdProto {
        #[prost(string, tag = "1")]
        pub domain: String,
        #[prost(int64, tag = "2")]
        pub version: i64,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct GraphProto {
        #[prost(message, repeated, tag = "1")]
        pub node: Vec<NodeProto>,
        #[prost(string, tag = "2")]
        pub name: String,
        #[prost(message, repeated, tag = "5")]
        pub initializer: Vec<TensorProto>,
        #[prost(message, repeated, tag = "11")]
        pub input: Vec<ValueInfoProto>,
        #[prost(message, repeated, tag = "12")]
        pub output: Vec<ValueInfoProto>,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct NodeProto {
        #[prost(string, repeated, tag = "1")]
        pub input: Vec<String>,
        #[prost(string, repeated, tag = "2")]
        pub output: Vec<String>,
        #[prost(string, tag = "3")]
        pub name: String,
        #[prost(string, tag = "4")]
        pub op_type: String,
        #[prost(message, repeated, tag = "5")]
        pub attribute: Vec<AttributeProto>,
        #[prost(string, tag = "7")]
        pub domain: String,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct AttributeProto {
        #[prost(string, tag = "1")]
        pub name: String,
        #[prost(float, tag = "2")]
        pub f: f32,
        #[prost(int64, tag = "3")]
        pub i: i64,
        #[prost(bytes = "vec", tag = "4")]
        pub s: Vec<u8>,
        #[prost(float, repeated, tag = "7")]
        pub floats: Vec<f32>,
        #[prost(int64, repeated, tag = "8")]
        pub ints: Vec<i64>,
        #[prost(int32, tag = "20")]
        pub r#type: i32,
    }

    /// `data_type` value for 32-bit floats.
    pub const FLOAT: i32 = 1;
    /// `data_type` value for 64-bit floats.
    pub const DOUBLE: i32 = 11;

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct TensorProto {
        #[prost(int64, repeated, tag = "1")]
        pub dims: Vec<i64>,
        #[prost(int32, tag = "2")]
        pub data_type: i32,
        #[prost(float, repeated, tag = "4")]
        pub float_data: Vec<f32>,
        #[prost(string, tag = "8")]
        pub name: String,
        #[prost(bytes = "vec", tag = "9")]
        pub raw_data: Vec<u8>,
        #[prost(double, repeated, tag = "10")]
        pub double_data: Vec<f64>,
        #[prost(int32, tag = "14")]
        pub data_location: i32,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct ValueInfoProto {
        #[prost(string, tag = "1")]
        pub name: String,
        #[prost(message, optional, tag = "2")]
        pub r#type: Option<TypeProto>,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct TypeProto {
        #[prost(message, optional, tag = "1")]
        pub tensor_type: Option<TensorTypeProto>,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct TensorTypeProto {
        #[prost(int32, tag = "1")]
        pub elem_type: i32,
        #[prost(message, optional, tag = "2")]
        pub shape: Option<TensorShapeProto>,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct TensorShapeProto {
        #[prost(message, repeated, tag = "1")]
        pub dim: Vec<Dimension>,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct Dimension {
        #[prost(int64, optional, tag = "1")]
        pub dim_value: Option<i64>,
        #[prost(string, optional, tag = "2")]
        pub dim_param: Option<String>,
    }
}

use proto::{AttributeProto, ModelProto, NodeProto, TensorProto};

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool(MaxPool2d),
}

/// An executable, truncated copy of an interchange-format feature stack.
#[derive(Debug, Clone, PartialEq)]
pub struct InterchangeModel {
    layers: Vec<Layer>,
    pub input_name: String,
    pub output_name: String,
}

fn unsupported(msg: impl Into<String>) -> BackboneError {
    BackboneError::Unsupported(msg.into())
}

fn load_err(msg: impl Into<String>) -> BackboneError {
    BackboneError::Load(msg.into())
}

fn tensor_values(t: &TensorProto) -> Result<Vec<f64>, BackboneError> {
    if t.data_location != 0 {
        return Err(unsupported(format!("tensor {} uses external data", t.name)));
    }
    let n: i64 = t.dims.iter().product();
    let values: Vec<f64> = match t.data_type {
        proto::FLOAT if !t.raw_data.is_empty() => t
            .raw_data
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect(),
        proto::FLOAT => t.float_data.iter().map(|&v| f64::from(v)).collect(),
        proto::DOUBLE if !t.raw_data.is_empty() => t
            .raw_data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        proto::DOUBLE => t.double_data.clone(),
        other => return Err(unsupported(format!("tensor {} has data type {other}", t.name))),
    };
    if values.len() as i64 != n {
        return Err(load_err(format!(
            "tensor {} holds {} values for dims {:?}",
            t.name,
            values.len(),
            t.dims
        )));
    }
    Ok(values)
}

fn attr<'a>(node: &'a NodeProto, name: &str) -> Option<&'a AttributeProto> {
    node.attribute.iter().find(|a| a.name == name)
}

fn ints(node: &NodeProto, name: &str) -> Option<Vec<usize>> {
    attr(node, name).map(|a| a.ints.iter().map(|&v| v.max(0) as usize).collect())
}

fn pair(v: Option<Vec<usize>>, default: usize, what: &str) -> Result<(usize, usize), BackboneError> {
    match v.as_deref() {
        None => Ok((default, default)),
        Some([a, b]) => Ok((*a, *b)),
        Some(other) => Err(unsupported(format!("{what} {other:?} is not 2-D"))),
    }
}

fn window(node: &NodeProto, kernel: (usize, usize)) -> Result<Window, BackboneError> {
    if let Some(a) = attr(node, "auto_pad") {
        let mode = String::from_utf8_lossy(&a.s);
        if mode != "NOTSET" && !mode.is_empty() {
            return Err(unsupported(format!("auto_pad {mode}")));
        }
    }
    let stride = pair(ints(node, "strides"), 1, "strides")?;
    let pads = match ints(node, "pads").as_deref() {
        None => (0, 0, 0, 0),
        Some([t, l, b, r]) => (*t, *l, *b, *r),
        Some(other) => return Err(unsupported(format!("pads {other:?}"))),
    };
    if pair(ints(node, "dilations"), 1, "dilations")? != (1, 1) {
        return Err(unsupported("dilated convolution"));
    }
    Ok(Window { kernel, stride, pads })
}

fn conv_layer(node: &NodeProto, init: &HashMap<&str, &TensorProto>) -> Result<Conv2d, BackboneError> {
    if attr(node, "group").is_some_and(|a| a.i != 1) {
        return Err(unsupported("grouped convolution"));
    }
    let wname = node.input.get(1).ok_or_else(|| load_err("Conv without weights"))?;
    let w = init
        .get(wname.as_str())
        .ok_or_else(|| unsupported(format!("Conv weights {wname} are not an initializer")))?;
    let [cout, cin, kh, kw] = w.dims[..] else {
        return Err(load_err(format!("Conv weights {wname} have dims {:?}", w.dims)));
    };
    let (cout, cin, kh, kw) = (cout as usize, cin as usize, kh as usize, kw as usize);
    if let Some(k) = ints(node, "kernel_shape") {
        if k != [kh, kw] {
            return Err(load_err("kernel_shape disagrees with weights"));
        }
    }
    let values = tensor_values(w)?;
    let mut weights = Array2::zeros((kh * kw * cin, cout));
    for co in 0..cout {
        for ci in 0..cin {
            for dy in 0..kh {
                for dx in 0..kw {
                    weights[[(dy * kw + dx) * cin + ci, co]] = values[((co * cin + ci) * kh + dy) * kw + dx];
                }
            }
        }
    }
    let bias = match node.input.get(2).filter(|s| !s.is_empty()) {
        Some(b) => {
            let t = init
                .get(b.as_str())
                .ok_or_else(|| unsupported(format!("Conv bias {b} is not an initializer")))?;
            let v = tensor_values(t)?;
            if v.len() != cout {
                return Err(load_err(format!("Conv bias {b} has {} values", v.len())));
            }
            Array1::from(v)
        }
        None => Array1::zeros(cout),
    };
    Ok(Conv2d {
        weights,
        bias,
        in_channels: cin,
        out_channels: cout,
        window: window(node, (kh, kw))?,
    })
}

impl InterchangeModel {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BackboneError> {
        let model = ModelProto::decode(bytes).map_err(|e| load_err(format!("not an ONNX model: {e}")))?;
        let graph = model.graph.ok_or_else(|| load_err("model has no graph"))?;
        let mut init: HashMap<&str, &TensorProto> = graph.initializer.iter().map(|t| (t.name.as_str(), t)).collect();
        // Exporters share equal tensors through Identity nodes.
        for node in graph.node.iter().filter(|n| n.op_type == "Identity") {
            if let (Some(src), Some(dst)) = (node.input.first(), node.output.first()) {
                if let Some(&t) = init.get(src.as_str()) {
                    init.insert(dst.as_str(), t);
                }
            }
        }
        let input_name = graph
            .input
            .iter()
            .map(|v| v.name.clone())
            .find(|n| !init.contains_key(n.as_str()))
            .ok_or_else(|| load_err("graph has no data input"))?;
        let last_pool = graph
            .node
            .iter()
            .rposition(|n| n.op_type == "MaxPool")
            .ok_or_else(|| unsupported("graph has no MaxPool node"))?;
        let mut layers = Vec::with_capacity(last_pool + 1);
        let mut current = input_name.clone();
        for node in &graph.node[..=last_pool] {
            if !node.domain.is_empty() && node.domain != "ai.onnx" {
                return Err(unsupported(format!("operator domain {}", node.domain)));
            }
            if node.op_type == "Identity" && node.output.first().is_some_and(|o| init.contains_key(o.as_str())) {
                continue;
            }
            if node.input.first() != Some(&current) {
                return Err(unsupported(format!(
                    "node {} ({}) does not continue a single chain",
                    node.name, node.op_type
                )));
            }
            let layer = match node.op_type.as_str() {
                "Conv" => Layer::Conv(conv_layer(node, &init)?),
                "Relu" => Layer::Relu,
                "Identity" => {
                    current = node
                        .output
                        .first()
                        .cloned()
                        .ok_or_else(|| load_err("Identity without output"))?;
                    continue;
                }
                "MaxPool" => {
                    if attr(node, "ceil_mode").is_some_and(|a| a.i != 0) {
                        return Err(unsupported("MaxPool ceil_mode"));
                    }
                    let k = pair(ints(node, "kernel_shape"), 0, "kernel_shape")?;
                    if k.0 == 0 || k.1 == 0 {
                        return Err(load_err("MaxPool without kernel_shape"));
                    }
                    Layer::MaxPool(MaxPool2d::new(window(node, k)?))
                }
                other => return Err(unsupported(format!("operator {other}"))),
            };
            layers.push(layer);
            current = node
                .output
                .first()
                .cloned()
                .ok_or_else(|| load_err(format!("node {} has no output", node.name)))?;
        }
        Ok(Self {
            layers,
            input_name,
            output_name: current,
        })
    }

    pub fn load(path: &Path) -> Result<Self, BackboneError> {
        let bytes = std::fs::read(path).map_err(|e| load_err(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Runs the truncated graph on one `(height, width, channel)` input.
    pub fn forward(&self, x: ArrayView3<f64>) -> Result<Array3<f64>, BackboneError> {
        let mut cur = x.to_owned();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv(c) => c.forward(cur.view())?,
                Layer::Relu => cur.mapv(|v| v.max(0.0)),
                Layer::MaxPool(p) => p.forward(cur.view())?.0,
            };
        }
        Ok(cur)
    }
}

/// Builders for small interchange files used by tests and examples.
pub mod build {
    use super::proto::*;
    use prost::Message;

    pub fn ints_attr(name: &str, v: &[i64]) -> AttributeProto {
        AttributeProto {
            name: name.into(),
            ints: v.to_vec(),
            r#type: 7,
            ..Default::default()
        }
    }

    pub fn node(op: &str, inputs: &[&str], output: &str, attribute: Vec<AttributeProto>) -> NodeProto {
        NodeProto {
            input: inputs.iter().map(|s| s.to_string()).collect(),
            output: vec![output.into()],
            name: format!("{op}_{output}"),
            op_type: op.into(),
            attribute,
            domain: String::new(),
        }
    }

    pub fn float_tensor(name: &str, dims: &[i64], values: &[f32]) -> TensorProto {
        TensorProto {
            dims: dims.to_vec(),
            data_type: FLOAT,
            name: name.into(),
            raw_data: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ..Default::default()
        }
    }

    pub fn model(nodes: Vec<NodeProto>, initializer: Vec<TensorProto>, input: &str) -> Vec<u8> {
        ModelProto {
            ir_version: 8,
            producer_name: "microfossil".into(),
            graph: Some(GraphProto {
                node: nodes,
                name: "features".into(),
                initializer,
                input: vec![ValueInfoProto {
                    name: input.into(),
                    r#type: None,
                }],
                output: Vec::new(),
            }),
            opset_import: vec![OperatorSetIdProto {
                domain: String::new(),
                version: 13,
            }],
        }
        .encode_to_vec()
    }

    /// A small stack mapping 224×224×3 to 7×7×512, followed by a `Flatten`
    /// that loading must cut off.
    pub fn tiny_feature_stack(seed: u64) -> Vec<u8> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut values = |n: usize, scale: f32| -> Vec<f32> { (0..n).map(|_| rng.gen_range(-scale..scale)).collect() };
        let w1 = float_tensor("w1", &[8, 3, 3, 3], &values(8 * 27, 0.5));
        let b1 = float_tensor("b1", &[8], &values(8, 0.1));
        let w2 = float_tensor("w2", &[512, 8, 1, 1], &values(512 * 8, 0.5));
        let nodes = vec![
            node(
                "Conv",
                &["input", "w1", "b1"],
                "c1",
                vec![
                    ints_attr("kernel_shape", &[3, 3]),
                    ints_attr("pads", &[1, 1, 1, 1]),
                    ints_attr("strides", &[1, 1]),
                ],
            ),
            node("Relu", &["c1"], "r1", vec![]),
            node(
                "MaxPool",
                &["r1"],
                "p1",
                vec![ints_attr("kernel_shape", &[4, 4]), ints_attr("strides", &[4, 4])],
            ),
            node("Conv", &["p1", "w2"], "c2", vec![ints_attr("kernel_shape", &[1, 1])]),
            node("Relu", &["c2"], "r2", vec![]),
            node(
                "MaxPool",
                &["r2"],
                "p2",
                vec![ints_attr("kernel_shape", &[8, 8]), ints_attr("strides", &[8, 8])],
            ),
            node("Flatten", &["p2"], "flat", vec![]),
        ];
        model(nodes, vec![w1, b1, w2], "input")
    }
}

#[cfg(test)]
mod tests {
    use super::build::*;
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn tiny_stack_is_truncated_to_seven_by_seven_by_512() {
        let m = InterchangeModel::from_bytes(&tiny_feature_stack(1)).unwrap();
        assert_eq!(m.output_name, "p2");
        let x = Array3::from_elem((224, 224, 3), 0.3);
        assert_eq!(m.forward(x.view()).unwrap().dim(), (7, 7, 512));
    }

    #[test]
    fn conv_weights_are_reordered_from_nchw() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let w: Vec<f32> = (0..2 * 3 * 3 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nodes = vec![
            node(
                "Conv",
                &["x", "w"],
                "c",
                vec![ints_attr("kernel_shape", &[3, 2]), ints_attr("pads", &[1, 0, 1, 1])],
            ),
            node("MaxPool", &["c"], "p", vec![ints_attr("kernel_shape", &[1, 1])]),
        ];
        let bytes = model(nodes, vec![float_tensor("w", &[2, 3, 3, 2], &w)], "x");
        let m = InterchangeModel::from_bytes(&bytes).unwrap();
        let x = Array3::from_shape_fn((5, 4, 3), |_| rng.gen_range(-1.0..1.0));
        let got = m.forward(x.view()).unwrap();
        // Direct NCHW evaluation.
        let (oh, ow) = (5, 4);
        assert_eq!(got.dim(), (oh, ow, 2));
        for co in 0..2 {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..3 {
                        for dy in 0..3 {
                            for dx in 0..2 {
                                let iy = y as isize + dy as isize - 1;
                                let ix = xo as isize + dx as isize;
                                if !(0..5).contains(&iy) || ix >= 4 {
                                    continue;
                                }
                                let wv = f64::from(w[((co * 3 + ci) * 3 + dy) * 2 + dx]);
                                acc += wv * x[[iy as usize, ix as usize, ci]];
                            }
                        }
                    }
                    assert!((got[[y, xo, co]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identity_aliases_and_pass_throughs_are_resolved() {
        let direct = vec![
            node("Conv", &["x", "w", "b"], "c", vec![ints_attr("kernel_shape", &[1, 1])]),
            node("MaxPool", &["c"], "p", vec![ints_attr("kernel_shape", &[1, 1])]),
        ];
        let aliased = vec![
            node("Identity", &["b"], "b_alias", vec![]),
            node("Identity", &["x"], "x_copy", vec![]),
            node(
                "Conv",
                &["x_copy", "w", "b_alias"],
                "c",
                vec![ints_attr("kernel_shape", &[1, 1])],
            ),
            node("Identity", &["c"], "c_copy", vec![]),
            node("MaxPool", &["c_copy"], "p", vec![ints_attr("kernel_shape", &[1, 1])]),
        ];
        let tensors = || {
            vec![
                float_tensor("w", &[2, 1, 1, 1], &[0.5, -2.0]),
                float_tensor("b", &[2], &[0.25, 1.0]),
            ]
        };
        let x = Array3::from_shape_fn((3, 2, 1), |(y, x, _)| (y * 2 + x) as f64);
        let a = InterchangeModel::from_bytes(&model(direct, tensors(), "x")).unwrap();
        let b = InterchangeModel::from_bytes(&model(aliased, tensors(), "x")).unwrap();
        assert_eq!(b.output_name, "p");
        let want = a.forward(x.view()).unwrap();
        assert_eq!(want[[2, 1, 1]], -9.0);
        assert_eq!(b.forward(x.view()).unwrap(), want);
    }

    #[test]
    fn unsupported_graphs_are_rejected() {
        let nodes = vec![
            node("Sigmoid", &["x"], "s", vec![]),
            node("MaxPool", &["s"], "p", vec![ints_attr("kernel_shape", &[2, 2])]),
        ];
        assert!(matches!(
            InterchangeModel::from_bytes(&model(nodes, vec![], "x")),
            Err(BackboneError::Unsupported(_))
        ));
        let no_pool = vec![node("Relu", &["x"], "r", vec![])];
        assert!(InterchangeModel::from_bytes(&model(no_pool, vec![], "x")).is_err());
        assert!(matches!(
            InterchangeModel::from_bytes(b"\xff\xff\xff garbage"),
            Err(BackboneError::Load(_))
        ));
    }
}
