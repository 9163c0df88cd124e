//! Text description of a network (TOML).
//!
//! ```toml
//! input = [3, 12, 12]
//!
//! [[node]]
//! name = "conv1"
//! op = "conv"
//! out_channels = 16
//! kernel = 3
//! pad = 1
//!
//! [[node]]
//! name = "gate1"
//! op = "gate"
//! site = "s1"
//! ```
//!
//! A node without `inputs` consumes the previous node (or the graph input
//! for the first node). The special name `input` refers to the graph input.
//! The graph output is `output` if given, otherwise the last node.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const INPUT: &str = "input";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    /// Per-sample input shape, `[C, H, W]` or `[F]`.
    pub input: Vec<usize>,
    #[serde(rename = "node")]
    pub nodes: Vec<NodeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    #[serde(flatten)]
    pub op: OpSpec,
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        stride: usize,
        #[serde(default, skip_serializing_if = "is_zero")]
        pad: usize,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        groups: usize,
    },
    Dense {
        out_features: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        /// Defaults to `kernel`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stride: Option<usize>,
    },
    Flatten,
    Gate {
        site: String,
    },
    Concat,
    /// Channels `[start, end)` of the input.
    Slice {
        start: usize,
        end: usize,
    },
}

impl GraphSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Layer-by-layer builder for sequential specs.
    pub fn sequential(input: Vec<usize>) -> SpecBuilder {
        SpecBuilder {
            spec: GraphSpec {
                input,
                nodes: Vec::new(),
                output: None,
            },
        }
    }

    /// The reference desk-scale network: three 3x3 convs with pooling and a
    /// dense head, gates on the inputs of conv2, conv3 and the head.
    pub fn toy_cnn(input: [usize; 3], widths: [usize; 3], classes: usize) -> Self {
        let [c1, c2, c3] = widths;
        GraphSpec::sequential(input.to_vec())
            .conv("conv1", c1, 3, 1, 1)
            .relu("relu1")
            .maxpool("pool1", 2)
            .gate("gate1", "s1")
            .conv("conv2", c2, 3, 1, 1)
            .relu("relu2")
            .maxpool("pool2", 2)
            .gate("gate2", "s2")
            .conv("conv3", c3, 3, 1, 1)
            .relu("relu3")
            .gate("gate3", "s3")
            .flatten("flat")
            .dense("fc", classes)
            .build()
    }
}

pub struct SpecBuilder {
    spec: GraphSpec,
}

impl SpecBuilder {
    fn push(mut self, name: &str, op: OpSpec) -> Self {
        self.spec.nodes.push(NodeSpec {
            name: name.to_string(),
            inputs: Vec::new(),
            op,
        });
        self
    }

    pub fn conv(self, name: &str, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        self.push(
            name,
            OpSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
                groups: 1,
            },
        )
    }

    pub fn grouped_conv(self, name: &str, out_channels: usize, kernel: usize, pad: usize, groups: usize) -> Self {
        self.push(
            name,
            OpSpec::Conv {
                out_channels,
                kernel,
                stride: 1,
                pad,
                groups,
            },
        )
    }

    pub fn dense(self, name: &str, out_features: usize) -> Self {
        self.push(name, OpSpec::Dense { out_features })
    }

    pub fn relu(self, name: &str) -> Self {
        self.push(name, OpSpec::Relu)
    }

    pub fn maxpool(self, name: &str, kernel: usize) -> Self {
        self.push(name, OpSpec::MaxPool { kernel, stride: None })
    }

    pub fn flatten(self, name: &str) -> Self {
        self.push(name, OpSpec::Flatten)
    }

    pub fn gate(self, name: &str, site: &str) -> Self {
        self.push(name, OpSpec::Gate { site: site.to_string() })
    }

    pub fn build(self) -> GraphSpec {
        self.spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        let spec = GraphSpec::toy_cnn([3, 12, 12], [8, 16, 16], 10);
        let text = spec.to_toml().unwrap();
        assert_eq!(GraphSpec::from_toml(&text).unwrap(), spec);
    }

    #[test]
    fn parses_hand_written_document() {
        let text = r#"
            input = [2, 6, 6]
            output = "fc"

            [[node]]
            name = "c1"
            op = "conv"
            out_channels = 4
            kernel = 3
            pad = 1
            groups = 2

            [[node]]
            name = "g"
            op = "gate"
            site = "s"

            [[node]]
            name = "pool"
            op = "max_pool"
            kernel = 2

            [[node]]
            name = "flat"
            op = "flatten"

            [[node]]
            name = "fc"
            op = "dense"
            out_features = 3
        "#;
        let spec = GraphSpec::from_toml(text).unwrap();
        assert_eq!(spec.nodes.len(), 5);
        assert_eq!(
            spec.nodes[0].op,
            OpSpec::Conv {
                out_channels: 4,
                kernel: 3,
                stride: 1,
                pad: 1,
                groups: 2
            }
        );
        assert_eq!(spec.nodes[2].op, OpSpec::MaxPool { kernel: 2, stride: None });
    }
}
