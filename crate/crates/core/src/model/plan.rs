//! Static description of every parameterised layer and attention site, in
//! execution order. Used for initialisation, the weight-file name set and
//! FLOP counting; forward passes record the same entries from live shapes.

use serde::{Deserialize, Serialize};

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Real-valued operand: charged as multiply-accumulate.
    FloatConv,
    SpikeConv,
    SpikeFc,
    Ssa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerOp {
    Conv { k: usize, stride: usize, pad: usize, groups: usize },
    Linear,
    /// Attention site; `cin == cout == d`.
    Ssa { heads: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub op: LayerOp,
    pub cin: usize,
    pub cout: usize,
    /// Output spatial extent (conv) or `(tokens, 1)` (linear / attention).
    pub out: (usize, usize),
    pub bn: bool,
    pub bias: bool,
}

impl LayerSpec {
    /// Dense MAC count of one sample at one timestep.
    pub fn flops(&self) -> u64 {
        let (h, w) = (self.out.0 as u64, self.out.1 as u64);
        match self.op {
            LayerOp::Conv { k, groups, .. } => {
                (k * k) as u64 * (self.cin / groups) as u64 * self.cout as u64 * h * w
            }
            LayerOp::Linear => h * self.cin as u64 * self.cout as u64,
            LayerOp::Ssa { heads } => {
                let dh = (self.cin / heads) as u64;
                2 * h * dh * dh * heads as u64
            }
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.op {
            LayerOp::Conv { k, groups, .. } => Some(vec![self.cout, self.cin / groups, k, k]),
            LayerOp::Linear => Some(vec![self.cout, self.cin]),
            LayerOp::Ssa { .. } => None,
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.op {
            LayerOp::Conv { k, groups, .. } => k * k * self.cin / groups,
            LayerOp::Linear => self.cin,
            LayerOp::Ssa { .. } => 0,
        }
    }
}

fn conv(name: String, kind: LayerKind, cin: usize, cout: usize, k: usize, stride: usize, groups: usize, out: usize) -> LayerSpec {
    LayerSpec {
        name,
        kind,
        op: LayerOp::Conv { k, stride, pad: k / 2, groups },
        cin,
        cout,
        out: (out, out),
        bn: true,
        bias: false,
    }
}

fn linear(name: String, cin: usize, cout: usize, tokens: usize, bn: bool) -> LayerSpec {
    LayerSpec {
        name,
        kind: LayerKind::SpikeFc,
        op: LayerOp::Linear,
        cin,
        cout,
        out: (tokens, 1),
        bn,
        bias: false,
    }
}

pub const HEAD_BRANCHES: [(&str, usize); 3] = [("cls", 1), ("offset", 2), ("size", 2)];

/// Every layer of the network in execution order.
pub fn plan(cfg: &ModelConfig) -> Vec<LayerSpec> {
    use LayerKind::*;
    let mut out = Vec::new();
    let mut side = cfg.search_size + cfg.template_size;
    side /= 2;
    out.push(conv("stem".into(), FloatConv, 3, cfg.c, 3, 2, 1, side));
    let mut ch = cfg.c;
    for (s, stage) in cfg.conv_stages.iter().enumerate() {
        let c = cfg.c * stage.mult;
        side /= 2;
        out.push(conv(format!("conv{s}.down"), SpikeConv, ch, c, 3, 2, 1, side));
        ch = c;
        let e = c * cfg.sep_expansion;
        for b in 0..stage.blocks {
            let p = format!("conv{s}.block{b}");
            out.push(conv(format!("{p}.sep.pw1"), SpikeConv, c, e, 1, 1, 1, side));
            out.push(conv(format!("{p}.sep.dw"), SpikeConv, e, e, 3, 1, e, side));
            out.push(conv(format!("{p}.sep.pw2"), SpikeConv, e, c, 1, 1, 1, side));
            out.push(conv(format!("{p}.group.conv1"), SpikeConv, c, c, 3, 1, 1, side));
            out.push(conv(format!("{p}.group.conv2"), SpikeConv, c, c, 3, 1, 1, side));
        }
    }
    let tokens = cfg.search_feat().pow(2) + cfg.template_feat().pow(2);
    let d0 = cfg.embed_dim(0);
    out.push(linear("tokenize".into(), ch, d0, tokens, false));
    let mut d = d0;
    for (s, stage) in cfg.transformer_stages.iter().enumerate() {
        let dn = cfg.c * stage.mult;
        if dn != d {
            out.push(linear(format!("tf{s}.proj"), d, dn, tokens, true));
            d = dn;
        }
        for b in 0..stage.blocks {
            let p = format!("tf{s}.block{b}");
            for m in ["q", "k", "v"] {
                out.push(linear(format!("{p}.attn.{m}"), d, d, tokens, true));
            }
            out.push(LayerSpec {
                name: format!("{p}.attn.ssa"),
                kind: Ssa,
                op: LayerOp::Ssa { heads: cfg.num_heads },
                cin: d,
                cout: d,
                out: (tokens, 1),
                bn: false,
                bias: false,
            });
            out.push(linear(format!("{p}.attn.o"), d, d, tokens, true));
            out.push(linear(format!("{p}.mlp.fc1"), d, d * cfg.mlp_ratio, tokens, true));
            out.push(linear(format!("{p}.mlp.fc2"), d * cfg.mlp_ratio, d, tokens, true));
        }
    }
    let hs = cfg.search_feat();
    let hc = cfg.head_channels();
    for (branch, cout) in HEAD_BRANCHES {
        let mut cin = d;
        for (i, &c) in hc.iter().enumerate() {
            out.push(conv(format!("head.{branch}.conv{}", i + 1), SpikeConv, cin, c, 3, 1, 1, hs));
            cin = c;
        }
        let mut last = conv(format!("head.{branch}.conv5"), FloatConv, cin, cout, 1, 1, 1, hs);
        last.bn = false;
        last.bias = true;
        out.push(last);
    }
    out
}

/// A named tensor the configuration implies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, trainable: bool| specs.push(ParamSpec { name, shape, trainable });
    for layer in plan(cfg) {
        let Some(ws) = layer.weight_shape() else { continue };
        push(format!("{}.weight", layer.name), ws, true);
        if layer.bias {
            push(format!("{}.bias", layer.name), vec![layer.cout], true);
        }
        if layer.bn {
            push(format!("{}.bn.gamma", layer.name), vec![layer.cout], true);
            push(format!("{}.bn.beta", layer.name), vec![layer.cout], true);
            push(format!("{}.bn.running_mean", layer.name), vec![layer.cout], false);
            push(format!("{}.bn.running_var", layer.name), vec![layer.cout], false);
        }
    }
    specs
}

/// Trainable scalar count.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg)
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.shape.iter().product::<usize>())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_sixteen_extents() {
        let cfg = ModelConfig::tiny();
        assert_eq!(cfg.stride(), 16);
        assert_eq!((cfg.search_feat(), cfg.template_feat()), (16, 8));
        let tok = plan(&cfg).into_iter().find(|l| l.name == "tokenize").unwrap();
        assert_eq!(tok.out.0, 64 + 256);
    }

    #[test]
    fn base_parameter_count_near_reported() {
        let n = parameter_count(&ModelConfig::base()) as f64 / 1e6;
        assert!((n - 107.26).abs() / 107.26 <= 0.10, "base has {n:.2}M parameters");
    }

    #[test]
    fn names_are_unique() {
        for cfg in [ModelConfig::base(), ModelConfig::tiny(), ModelConfig::toy()] {
            let specs = param_specs(&cfg);
            let set: std::collections::BTreeSet<_> = specs.iter().map(|p| &p.name).collect();
            assert_eq!(set.len(), specs.len());
        }
    }

    #[test]
    fn head_is_float_only_at_branch_end() {
        let p = plan(&ModelConfig::toy());
        let heads: Vec<_> = p.iter().filter(|l| l.name.starts_with("head.")).collect();
        assert_eq!(heads.len(), 15);
        for l in heads {
            assert_eq!(l.kind == LayerKind::FloatConv, l.name.ends_with("conv5"), "{}", l.name);
        }
        assert_eq!(p[0].kind, LayerKind::FloatConv);
    }
}
