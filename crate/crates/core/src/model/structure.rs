use super::{BackboneLayer, ConvLayer, PsnetModel};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Input,
    Backbone,
    Psm(usize),
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Input,
    Conv { kernel: usize, dilation: usize, c_in: usize, c_out: usize },
    Pool,
    GlobalPool,
    Concat,
    Gate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructNode {
    pub name: String,
    pub kind: NodeKind,
    pub stage: Stage,
    pub inputs: Vec<usize>,
}

/// Layer-level dataflow graph of a model, nodes in topological order.
#[derive(Clone, Debug, PartialEq)]
pub struct Structure {
    nodes: Vec<StructNode>,
    psm_inputs: Vec<usize>,
    branch_outputs: Vec<Vec<usize>>,
}

impl Structure {
    pub fn of<T: Scalar>(model: &PsnetModel<T>) -> Self {
        let mut g = Graph::default();
        let mut x = g.push("input", NodeKind::Input, Stage::Input, vec![]);

        let mut pools = 0;
        for (i, layer) in model.backbone.iter().enumerate() {
            x = match layer {
                BackboneLayer::Conv(c) => g.conv(&format!("backbone.{i}"), c, Stage::Backbone, x),
                BackboneLayer::Pool => {
                    pools += 1;
                    g.push(&format!("backbone.pool{pools}"), NodeKind::Pool, Stage::Backbone, vec![x])
                }
            };
        }

        let mut psm_inputs = Vec::new();
        let mut branch_outputs = Vec::new();
        for (k, psm) in model.psms.iter().enumerate() {
            let stage = Stage::Psm(k);
            psm_inputs.push(x);
            let mut outs: Vec<usize> = Vec::new();
            for (b, layers) in psm.branches.iter().enumerate() {
                let p = format!("psm{k}.branch{b}");
                let reduced = g.conv(&format!("{p}.reduce"), &layers.reduce, stage, x);
                let raw = g.conv(&format!("{p}.conv"), &layers.conv, stage, reduced);
                let out = match (&layers.pass, outs.last()) {
                    (Some(pass), Some(&prev)) => {
                        let joined = g.push(&format!("{p}.concat"), NodeKind::Concat, stage, vec![raw, prev]);
                        g.conv(&format!("{p}.pass"), pass, stage, joined)
                    }
                    _ => raw,
                };
                outs.push(out);
            }
            let joined = g.push(&format!("psm{k}.concat"), NodeKind::Concat, stage, outs.clone());
            let mut y = g.conv(&format!("psm{k}.fuse"), &psm.fuse, stage, joined);
            if let Some(gam) = &psm.gam {
                let pooled = g.push(&format!("psm{k}.gam.pool"), NodeKind::GlobalPool, stage, vec![x]);
                let s = g.conv(&format!("psm{k}.gam.squeeze"), &gam.squeeze, stage, pooled);
                let e = g.conv(&format!("psm{k}.gam.excite"), &gam.excite, stage, s);
                y = g.push(&format!("psm{k}.gate"), NodeKind::Gate, stage, vec![y, e]);
            }
            branch_outputs.push(outs);
            x = y;
        }

        for (i, layer) in model.head.iter().enumerate() {
            x = g.conv(&format!("head.conv{}", i + 1), layer, Stage::Head, x);
        }

        Structure {
            nodes: g.nodes,
            psm_inputs,
            branch_outputs,
        }
    }

    pub fn nodes(&self) -> &[StructNode] {
        &self.nodes
    }

    pub fn conv_count(&self, stage: Stage) -> usize {
        self.count(stage, |k| matches!(k, NodeKind::Conv { .. }))
    }

    pub fn pool_count(&self, stage: Stage) -> usize {
        self.count(stage, |k| matches!(k, NodeKind::Pool))
    }

    fn count(&self, stage: Stage, pred: impl Fn(&NodeKind) -> bool) -> usize {
        self.nodes.iter().filter(|n| n.stage == stage && pred(&n.kind)).count()
    }

    /// Number of distinct paths from a PSM's input to a branch's final output.
    /// Each path passes through a different stack of convolutions, so this is
    /// the number of receptive-field combinations the branch mixes.
    pub fn count_paths(&self, psm: usize, branch: usize) -> Result<usize> {
        let target = *self
            .branch_outputs
            .get(psm)
            .and_then(|b| b.get(branch))
            .ok_or_else(|| Error::Config(format!("no branch {branch} in PSM {psm}")))?;
        let source = self.psm_inputs[psm];
        let mut paths = vec![0usize; target + 1];
        paths[source] = 1;
        for i in source + 1..=target {
            paths[i] = self.nodes[i].inputs.iter().map(|&j| paths[j]).sum();
        }
        Ok(paths[target])
    }
}

impl<T: Scalar> PsnetModel<T> {
    pub fn structure(&self) -> Structure {
        Structure::of(self)
    }

    pub fn count_paths(&self, psm: usize, branch: usize) -> Result<usize> {
        self.structure().count_paths(psm, branch)
    }
}

#[derive(Default)]
struct Graph {
    nodes: Vec<StructNode>,
}

impl Graph {
    fn push(&mut self, name: &str, kind: NodeKind, stage: Stage, inputs: Vec<usize>) -> usize {
        self.nodes.push(StructNode {
            name: name.to_string(),
            kind,
            stage,
            inputs,
        });
        self.nodes.len() - 1
    }

    fn conv(&mut self, name: &str, layer: &ConvLayer, stage: Stage, input: usize) -> usize {
        let kind = NodeKind::Conv {
            kernel: layer.kernel,
            dilation: layer.dilation,
            c_in: layer.c_in,
            c_out: layer.c_out,
        };
        self.push(name, kind, stage, vec![input])
    }
}

#[cfg(test)]
mod tests {
    use super::super::{build_model, ModelConfig, Variant};
    use super::*;
    use crate::tensor::SeededRng;

    fn structure(variant: Variant) -> Structure {
        let m: PsnetModel<f32> = build_model(&ModelConfig::desk(8, variant), &mut SeededRng::new(0)).unwrap();
        m.structure()
    }

    #[test]
    fn layer_counts() {
        let s = structure(Variant::psnet());
        assert_eq!(s.conv_count(Stage::Backbone), 10);
        assert_eq!(s.pool_count(Stage::Backbone), 3);
        assert_eq!(s.conv_count(Stage::Head), 4);
    }

    #[test]
    fn path_counts_grow_with_message_passing() {
        let s = structure(Variant::psnet());
        for k in 0..3 {
            let counts: Vec<_> = (0..4).map(|b| s.count_paths(k, b).unwrap()).collect();
            assert_eq!(counts, vec![1, 2, 3, 4]);
        }
        let s = structure(Variant::baseline());
        let counts: Vec<_> = (0..4).map(|b| s.count_paths(2, b).unwrap()).collect();
        assert_eq!(counts, vec![1, 1, 1, 1]);
    }

    #[test]
    fn nodes_are_topologically_ordered() {
        let s = structure(Variant::psnet());
        for (i, n) in s.nodes().iter().enumerate() {
            assert!(n.inputs.iter().all(|&j| j < i), "{}", n.name);
        }
    }

    #[test]
    fn unknown_branch_is_an_error() {
        assert!(structure(Variant::psnet()).count_paths(0, 4).is_err());
        assert!(structure(Variant::psnet()).count_paths(3, 0).is_err());
    }
}
