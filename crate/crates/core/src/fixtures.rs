//! Bundled toy-scale networks. Four topology families cover the usual
//! embedded workloads: a dense autoencoder stack, a keyword-spotting CNN
//! with depthwise blocks, a visual-wake-words net with alternating
//! depthwise/pointwise convs, and a residual image classifier. All stay
//! at or below 64 channels so brute-force oracles remain fast.
//!
//! Interior conv layers of the `*_mixed` variants carry ternary weights
//! (first and last stay 8-bit, as do all depthwise layers), mirroring how
//! such networks are quantized when both accelerators are in play. Every
//! layer feeding a ternary conv ends in a fused ReLU, so the analog
//! path's 7-bit input clip is a no-op and results stay bit-exact.

use crate::graph::{Attrs, DataType, Graph, Node, OpKind, TensorSpec};

/// xorshift64*; deterministic weight material for the fixtures.
pub struct Rng(u64);

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng(seed.max(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.0 = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in [lo, hi].
    pub fn range(&mut self, lo: i32, hi: i32) -> i32 {
        lo + (self.next_u64() % (hi - lo + 1) as u64) as i32
    }

    pub fn ternary(&mut self) -> i32 {
        // mildly sparse: ~40% zeros
        match self.next_u64() % 5 {
            0 | 1 => 0,
            2 | 3 => 1,
            _ => -1,
        }
    }
}

struct Builder {
    tensors: Vec<TensorSpec>,
    nodes: Vec<Node>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    rng: Rng,
}

impl Builder {
    fn new(seed: u64) -> Builder {
        Builder { tensors: Vec::new(), nodes: Vec::new(), inputs: Vec::new(), outputs: Vec::new(), rng: Rng::new(seed) }
    }

    fn input(&mut self, name: &str, shape: Vec<usize>) -> String {
        self.tensors.push(TensorSpec { name: name.into(), shape: Some(shape), dtype: DataType::I8, data: None });
        self.inputs.push(name.into());
        name.into()
    }

    fn activation(&mut self, name: &str, dtype: DataType) -> String {
        self.tensors.push(TensorSpec { name: name.into(), shape: None, dtype, data: None });
        name.into()
    }

    fn constant(&mut self, name: &str, shape: Vec<usize>, dtype: DataType, data: Vec<i32>) -> String {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        self.tensors.push(TensorSpec { name: name.into(), shape: Some(shape), dtype, data: Some(data) });
        name.into()
    }

    fn node(&mut self, id: &str, op: OpKind, inputs: Vec<String>, output: String, attrs: Attrs) {
        self.nodes.push(Node { id: id.into(), op, inputs, output, attrs });
    }

    /// Requant tail: right_shift -> clip -> cast(i8) -> optional relu clip.
    fn requant(&mut self, stem: &str, from: String, shift: u32, relu: bool) -> String {
        let t_shift = self.activation(&format!("{stem}_shifted"), DataType::I32);
        self.node(
            &format!("{stem}_shift"),
            OpKind::RightShift,
            vec![from],
            t_shift.clone(),
            Attrs { amount: Some(shift), ..Attrs::default() },
        );
        let t_clip = self.activation(&format!("{stem}_clipped"), DataType::I32);
        self.node(
            &format!("{stem}_clip"),
            OpKind::Clip,
            vec![t_shift],
            t_clip.clone(),
            Attrs { min: Some(-128), max: Some(127), ..Attrs::default() },
        );
        let t_cast = self.activation(&format!("{stem}_i8"), DataType::I8);
        self.node(
            &format!("{stem}_cast"),
            OpKind::Cast,
            vec![t_clip],
            t_cast.clone(),
            Attrs { dtype: Some(DataType::I8), ..Attrs::default() },
        );
        if !relu {
            return t_cast;
        }
        let t_relu = self.activation(&format!("{stem}_relu"), DataType::I8);
        self.node(
            &format!("{stem}_act"),
            OpKind::Clip,
            vec![t_cast],
            t_relu.clone(),
            Attrs { min: Some(0), max: Some(127), ..Attrs::default() },
        );
        t_relu
    }

    fn weights(&mut self, name: &str, shape: Vec<usize>, ternary: bool) -> String {
        let count = shape.iter().product();
        let data: Vec<i32> = if ternary {
            (0..count).map(|_| self.rng.ternary()).collect()
        } else {
            (0..count).map(|_| self.rng.range(-4, 4)).collect()
        };
        let dtype = if ternary { DataType::Ternary } else { DataType::I8 };
        self.constant(name, shape, dtype, data)
    }

    fn bias(&mut self, name: &str, k: usize) -> String {
        let data: Vec<i32> = (0..k).map(|_| self.rng.range(-100, 100)).collect();
        self.constant(name, vec![k], DataType::I32, data)
    }

    /// conv/dwconv + bias_add + requant chain. Returns the i8 output name.
    #[allow(clippy::too_many_arguments)]
    fn conv_block(
        &mut self,
        stem: &str,
        from: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        ternary: bool,
        shift: u32,
        relu: bool,
        depthwise: bool,
    ) -> String {
        let w_shape = if depthwise { vec![in_ch, 1, kernel, kernel] } else { vec![out_ch, in_ch, kernel, kernel] };
        let w = self.weights(&format!("{stem}_w"), w_shape, ternary);
        let b = self.bias(&format!("{stem}_b"), out_ch);
        let t_acc = self.activation(&format!("{stem}_acc"), DataType::I32);
        let op = if depthwise { OpKind::DepthwiseConv2d } else { OpKind::Conv2d };
        self.node(
            stem,
            op,
            vec![from, w],
            t_acc.clone(),
            Attrs { stride: Some(stride), padding: Some(padding), ..Attrs::default() },
        );
        let t_biased = self.activation(&format!("{stem}_biased"), DataType::I32);
        self.node(&format!("{stem}_bias"), OpKind::BiasAdd, vec![t_acc, b], t_biased.clone(), Attrs::default());
        self.requant(stem, t_biased, shift, relu)
    }

    fn dense_block(&mut self, stem: &str, from: String, in_ch: usize, out_ch: usize, ternary: bool, shift: u32, relu: bool) -> String {
        let w = self.weights(&format!("{stem}_w"), vec![out_ch, in_ch], ternary);
        let b = self.bias(&format!("{stem}_b"), out_ch);
        let t_acc = self.activation(&format!("{stem}_acc"), DataType::I32);
        self.node(stem, OpKind::Dense, vec![from, w], t_acc.clone(), Attrs::default());
        let t_biased = self.activation(&format!("{stem}_biased"), DataType::I32);
        self.node(&format!("{stem}_bias"), OpKind::BiasAdd, vec![t_acc, b], t_biased.clone(), Attrs::default());
        self.requant(stem, t_biased, shift, relu)
    }

    /// Residual add with a requant tail.
    fn add_block(&mut self, stem: &str, a: String, b: String, shift: u32, relu: bool) -> String {
        let t_sum = self.activation(&format!("{stem}_sum"), DataType::I32);
        self.node(stem, OpKind::Add, vec![a, b], t_sum.clone(), Attrs::default());
        self.requant(stem, t_sum, shift, relu)
    }

    fn avg_pool(&mut self, stem: &str, from: String, window: usize) -> String {
        let out = self.activation(&format!("{stem}_out"), DataType::I8);
        self.node(
            stem,
            OpKind::AvgPool2d,
            vec![from],
            out.clone(),
            Attrs { window: Some(window), stride: Some(window), ..Attrs::default() },
        );
        out
    }

    fn softmax(&mut self, stem: &str, from: String) -> String {
        let out = self.activation(&format!("{stem}_out"), DataType::I8);
        self.node(stem, OpKind::Softmax, vec![from], out.clone(), Attrs::default());
        out
    }

    fn finish(mut self, outputs: Vec<String>) -> Graph {
        self.outputs = outputs;
        let g = Graph { tensors: self.tensors, nodes: self.nodes, inputs: self.inputs, outputs: self.outputs };
        crate::graph::infer_shapes(&g).expect("fixture must infer")
    }
}

/// Residual image classifier: 8 conv regions (incl. one 1x1 downsample
/// skip), three residual adds, global pooling, a classifier head and
/// softmax. `mixed` puts ternary weights on the interior convs.
fn resnet_like(mixed: bool) -> Graph {
    let mut b = Builder::new(0xA11CE);
    let t = |_i: usize| mixed; // interior convs follow the variant
    let input = b.input("input", vec![8, 16, 16]);

    let c1 = b.conv_block("conv1", input, 8, 16, 3, 1, 1, false, 5, true, false);
    let c2 = b.conv_block("conv2", c1.clone(), 16, 16, 3, 1, 1, t(2), 5, true, false);
    let c3 = b.conv_block("conv3", c2, 16, 16, 3, 1, 1, t(3), 5, false, false);
    let a1 = b.add_block("res1", c3, c1, 1, true);

    let c4 = b.conv_block("conv4", a1.clone(), 16, 32, 3, 2, 1, t(4), 5, true, false);
    let c5 = b.conv_block("conv5", c4, 32, 32, 3, 1, 1, t(5), 5, false, false);
    let c6 = b.conv_block("conv6", a1, 16, 32, 1, 2, 0, t(6), 4, false, false);
    let a2 = b.add_block("res2", c5, c6, 1, true);

    let c7 = b.conv_block("conv7", a2.clone(), 32, 64, 3, 2, 1, t(7), 6, true, false);
    let c8 = b.conv_block("conv8", c7.clone(), 64, 64, 3, 1, 1, false, 6, false, false);
    let a3 = b.add_block("res3", c8, c7, 1, true);

    let pooled = b.avg_pool("pool", a3, 4);
    let logits = b.dense_block("fc", pooled, 64, 10, false, 4, false);
    let probs = b.softmax("softmax", logits);
    b.finish(vec![probs])
}

pub fn resnet_8b() -> Graph {
    resnet_like(false)
}

pub fn resnet_mixed() -> Graph {
    resnet_like(true)
}

/// Keyword-spotting CNN: a strided stem conv, four depthwise+pointwise
/// blocks, pooling and a small classifier. Pointwise convs are ternary,
/// depthwise stay 8-bit.
pub fn dscnn() -> Graph {
    let mut b = Builder::new(0xD5C22);
    let input = b.input("input", vec![4, 16, 16]);
    let mut x = b.conv_block("conv1", input, 4, 32, 3, 2, 1, false, 4, true, false);
    for i in 1..=4 {
        let dw = b.conv_block(&format!("dw{i}"), x, 32, 32, 3, 1, 1, false, 5, true, true);
        x = b.conv_block(&format!("pw{i}"), dw, 32, 32, 1, 1, 0, true, 4, true, false);
    }
    let pooled = b.avg_pool("pool", x, 8);
    let logits = b.dense_block("fc", pooled, 32, 8, false, 4, false);
    let probs = b.softmax("softmax", logits);
    b.finish(vec![probs])
}

/// Visual-wake-words net with alternating depthwise/pointwise blocks and
/// the largest activations of the bundle; the fixture used for the
/// reduced-L2 out-of-memory reenactment.
pub fn mobilenet() -> Graph {
    let mut b = Builder::new(0x30B11E);
    let input = b.input("input", vec![3, 32, 32]);
    let c1 = b.conv_block("conv1", input, 3, 16, 3, 2, 1, false, 4, true, false);
    let dw1 = b.conv_block("dw1", c1, 16, 16, 3, 1, 1, false, 5, true, true);
    let pw1 = b.conv_block("pw1", dw1, 16, 32, 1, 1, 0, true, 4, true, false);
    let dw2 = b.conv_block("dw2", pw1, 32, 32, 3, 2, 1, false, 5, true, true);
    let pw2 = b.conv_block("pw2", dw2, 32, 64, 1, 1, 0, true, 4, true, false);
    let dw3 = b.conv_block("dw3", pw2, 64, 64, 3, 1, 1, false, 5, true, true);
    let pw3 = b.conv_block("pw3", dw3, 64, 64, 1, 1, 0, true, 4, true, false);
    let pooled = b.avg_pool("pool", pw3, 8);
    let logits = b.dense_block("fc", pooled, 64, 2, false, 4, false);
    let probs = b.softmax("softmax", logits);
    b.finish(vec![probs])
}

/// Anomaly-detection autoencoder: a pure dense stack. The two interior
/// layers are ternary and exercise the dense-as-1x1-conv analog path.
pub fn dae() -> Graph {
    let mut b = Builder::new(0xDAE);
    let input = b.input("input", vec![64]);
    let d1 = b.dense_block("fc1", input, 64, 32, false, 5, true);
    let d2 = b.dense_block("fc2", d1, 32, 16, true, 4, true);
    let d3 = b.dense_block("fc3", d2, 16, 32, true, 4, true);
    let d4 = b.dense_block("fc4", d3, 32, 64, false, 5, false);
    b.finish(vec![d4])
}

pub fn all_fixtures() -> Vec<(&'static str, Graph)> {
    vec![
        ("resnet_8b", resnet_8b()),
        ("resnet_mixed", resnet_mixed()),
        ("dscnn", dscnn()),
        ("mobilenet", mobilenet()),
        ("dae", dae()),
    ]
}

/// Single-layer graphs for the tiling benchmark sweep: three digital
/// conv layers of distinct shapes.
pub fn bench_layers() -> Vec<(String, Graph)> {
    let mk = |name: &str, in_ch: usize, out_ch: usize, side: usize, kernel: usize, pad: usize| {
        let mut b = Builder::new(0xBE2C4);
        let input = b.input("input", vec![in_ch, side, side]);
        let out = b.conv_block("conv", input, in_ch, out_ch, kernel, 1, pad, false, 5, true, false);
        (name.to_string(), b.finish(vec![out]))
    };
    vec![
        mk("conv_3x3_c16_k16_32x32", 16, 16, 32, 3, 1),
        mk("pointwise_c16_k64_16x16", 16, 64, 16, 1, 0),
        mk("conv_5x5_c32_k16_16x16", 32, 16, 16, 5, 2),
    ]
}

/// Deterministic input tensors for a fixture. Values stay in [0, 127]
/// so first-layer activations are valid for either accelerator path.
pub fn fixture_inputs(g: &Graph, seed: u64) -> std::collections::BTreeMap<String, Vec<i32>> {
    let mut rng = Rng::new(seed);
    g.inputs
        .iter()
        .map(|name| {
            let count = g.tensor(name).and_then(|t| t.elem_count()).unwrap_or(0);
            (name.clone(), (0..count).map(|_| rng.range(0, 127)).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate;

    #[test]
    fn fixtures_validate_cleanly() {
        for (name, g) in all_fixtures() {
            let diags = validate(&g);
            assert!(diags.is_empty(), "{name}: {diags:?}");
        }
    }

    #[test]
    fn resnet_has_eight_conv_regions() {
        let g = resnet_mixed();
        let regions = crate::dispatch::match_patterns(&g);
        let convs: Vec<_> = regions
            .iter()
            .filter(|r| r.pattern == crate::platform::PatternKind::Conv2dRequant)
            .collect();
        assert_eq!(convs.len(), 8);
        // interior convs are ternary, first and last 8-bit
        assert_eq!(convs[0].weight_dtype, Some(DataType::I8));
        assert_eq!(convs[7].weight_dtype, Some(DataType::I8));
        for r in &convs[1..7] {
            assert_eq!(r.weight_dtype, Some(DataType::Ternary), "{}", r.anchor);
        }
    }

    #[test]
    fn fixture_outputs_are_not_degenerate() {
        // all-saturated or all-zero outputs would make bit-exactness vacuous
        for (name, g) in all_fixtures() {
            let inputs = fixture_inputs(&g, 7);
            let out = crate::exec::run_graph(&g, &inputs).unwrap();
            for (tensor, value) in &out {
                if let crate::exec::Value::Int(v) = value {
                    let distinct: std::collections::HashSet<i32> = v.iter().copied().collect();
                    assert!(distinct.len() > 1, "{name}:{tensor} output is constant {v:?}");
                }
            }
        }
    }
}
