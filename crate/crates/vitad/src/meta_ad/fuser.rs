//! Fusers: turn encoder stage features into the decoder input.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::vit::{attention_block, join, Block, Linear, ParamTree, ViTConfig};

/// How encoder stages are combined before the decoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FuserVariant {
    /// `Linear(F_N)`.
    LastStageLinear,
    /// `Linear([F_i, F_j, …])` over the channel concatenation of the
    /// selected stages. Index 0 is the patch-embedding stem.
    ConcatStages(Vec<usize>),
    /// `Linear(F_i + F_j + …)`.
    AddStages(Vec<usize>),
    /// `Linear(F_N)` followed by residual 1×1 → 3×3 → 1×1 bottlenecks.
    ConvBottleneck(usize),
    /// `Linear(F_N)` followed by transformer blocks.
    VitBlocks(usize),
    /// `F_N` unchanged; no parameters.
    Identity,
}

impl fmt::Display for FuserVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stages = |s: &[usize]| s.iter().map(|i| i.to_string()).collect::<String>();
        match self {
            FuserVariant::LastStageLinear => write!(f, "last_stage_linear"),
            FuserVariant::ConcatStages(s) => write!(f, "concat_stages({})", stages(s)),
            FuserVariant::AddStages(s) => write!(f, "add_stages({})", stages(s)),
            FuserVariant::ConvBottleneck(n) => write!(f, "conv_bottleneck({n})"),
            FuserVariant::VitBlocks(n) => write!(f, "vit_blocks({n})"),
            FuserVariant::Identity => write!(f, "identity"),
        }
    }
}

impl FromStr for FuserVariant {
    type Err = Error;

    /// Parses the [`Display`](fmt::Display) form. Stage lists are digit
    /// strings (`concat_stages(1234)`) or comma separated.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = match s.split_once('(') {
            Some((name, rest)) => {
                let arg = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::config(format!("unbalanced parenthesis in fuser variant {s:?}")))?;
                (name.trim(), Some(arg.trim()))
            }
            None => (s, None),
        };
        let count = |arg: Option<&str>| -> Result<usize> {
            arg.unwrap_or("1")
                .parse()
                .map_err(|_| Error::config(format!("bad layer count in fuser variant {s:?}")))
        };
        let stages = |arg: Option<&str>| -> Result<Vec<usize>> {
            let arg = arg.ok_or_else(|| Error::config(format!("fuser variant {s:?} needs a stage list")))?;
            let parsed: Option<Vec<usize>> = if arg.contains(',') {
                arg.split(',').map(|p| p.trim().parse().ok()).collect()
            } else {
                arg.chars().map(|c| c.to_digit(10).map(|d| d as usize)).collect()
            };
            parsed.ok_or_else(|| Error::config(format!("bad stage list in fuser variant {s:?}")))
        };
        match name {
            "last_stage_linear" => Ok(FuserVariant::LastStageLinear),
            "concat_stages" => Ok(FuserVariant::ConcatStages(stages(arg)?)),
            "add_stages" => Ok(FuserVariant::AddStages(stages(arg)?)),
            "conv_bottleneck" => Ok(FuserVariant::ConvBottleneck(count(arg)?)),
            "vit_blocks" => Ok(FuserVariant::VitBlocks(count(arg)?)),
            "identity" => Ok(FuserVariant::Identity),
            _ => Err(Error::config(format!("unknown fuser variant {s:?}"))),
        }
    }
}

/// Spatial alignment applied to each stage before fusing. Columnar models
/// share one token grid, so only the identity exists.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResizePolicy {
    #[default]
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuserConfig {
    pub variant: FuserVariant,
    pub resize_policy: ResizePolicy,
}

impl Default for FuserConfig {
    fn default() -> Self {
        Self {
            variant: FuserVariant::LastStageLinear,
            resize_policy: ResizePolicy::Identity,
        }
    }
}

impl FuserConfig {
    pub fn validate(&self, vit: &ViTConfig) -> Result<()> {
        let n = vit.encoder_stage_count();
        match &self.variant {
            FuserVariant::ConcatStages(sel) | FuserVariant::AddStages(sel) => {
                if sel.is_empty() {
                    return Err(Error::config("fuser stage selection is empty"));
                }
                if let Some(bad) = sel.iter().find(|&&i| i > n) {
                    return Err(Error::config(format!("fuser selects stage {bad} but the encoder has {n}")));
                }
                let mut sorted = sel.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != sel.len() {
                    return Err(Error::config(format!("fuser stage selection {sel:?} repeats a stage")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Input width of the fuser's linear layer.
    pub fn linear_inputs(&self, vit: &ViTConfig) -> usize {
        match &self.variant {
            FuserVariant::ConcatStages(sel) => sel.len() * vit.embed_dim,
            _ => vit.embed_dim,
        }
    }
}

/// Residual 1×1 → 3×3 → 1×1 block on the token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck<P> {
    pub reduce: Linear<P>,
    /// 3×3 kernel as `[9·C, C]`, see [`Tape::im2col_3x3`].
    pub conv: Linear<P>,
    pub expand: Linear<P>,
}

impl<P> ParamTree for Bottleneck<P> {
    type Leaf = P;
    type Rebind<Q> = Bottleneck<Q>;

    fn map_leaves<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Bottleneck<Q> {
        Bottleneck {
            reduce: self.reduce.map_leaves(&join(prefix, "reduce"), f),
            conv: self.conv.map_leaves(&join(prefix, "conv"), f),
            expand: self.expand.map_leaves(&join(prefix, "expand"), f),
        }
    }

    fn for_each_leaf_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.reduce.for_each_leaf_mut(&join(prefix, "reduce"), f);
        self.conv.for_each_leaf_mut(&join(prefix, "conv"), f);
        self.expand.for_each_leaf_mut(&join(prefix, "expand"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fuser<P> {
    pub linear: Option<Linear<P>>,
    pub bottlenecks: Vec<Bottleneck<P>>,
    pub blocks: Vec<Block<P>>,
}

impl Fuser<Tensor> {
    /// The linear layer is drawn first, so the extra-layer variants with
    /// zero layers reproduce `LastStageLinear` exactly for the same seed.
    pub fn init(cfg: &FuserConfig, vit: &ViTConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = vit.embed_dim;
        let linear = match cfg.variant {
            FuserVariant::Identity => None,
            _ => Some(Linear::init(cfg.linear_inputs(vit), c, rng)),
        };
        let bottlenecks = match cfg.variant {
            FuserVariant::ConvBottleneck(n) => (0..n)
                .map(|_| Bottleneck {
                    reduce: Linear::init(c, c, rng),
                    conv: Linear::init(9 * c, c, rng),
                    expand: Linear::init(c, c, rng),
                })
                .collect(),
            _ => Vec::new(),
        };
        let blocks = match cfg.variant {
            FuserVariant::VitBlocks(n) => (0..n).map(|_| Block::init(vit, rng)).collect(),
            _ => Vec::new(),
        };
        Self {
            linear,
            bottlenecks,
            blocks,
        }
    }
}

impl<P> ParamTree for Fuser<P> {
    type Leaf = P;
    type Rebind<Q> = Fuser<Q>;

    fn map_leaves<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Fuser<Q> {
        Fuser {
            linear: self.linear.as_ref().map(|l| l.map_leaves(&join(prefix, "linear"), f)),
            bottlenecks: self
                .bottlenecks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map_leaves(&join(prefix, &format!("bottlenecks.{i}")), f))
                .collect(),
            blocks: self.blocks.map_leaves(&join(prefix, "blocks"), f),
        }
    }

    fn for_each_leaf_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        if let Some(l) = self.linear.as_mut() {
            l.for_each_leaf_mut(&join(prefix, "linear"), f);
        }
        for (i, b) in self.bottlenecks.iter_mut().enumerate() {
            b.for_each_leaf_mut(&join(prefix, &format!("bottlenecks.{i}")), f);
        }
        self.blocks.for_each_leaf_mut(&join(prefix, "blocks"), f);
    }
}

/// Computes `F̂_f` from the stem (stage 0) and the encoder stages `F_1…F_N`.
pub fn fuse<T: Real>(
    tape: &mut Tape<T>,
    fuser: &Fuser<Var>,
    cfg: &FuserConfig,
    vit: &ViTConfig,
    stem: Var,
    stages: &[Var],
) -> Result<Var> {
    let last = *stages.last().ok_or_else(|| Error::config("fuser got no encoder stages"))?;
    let pick = |i: usize| -> Result<Var> {
        match i {
            0 => Ok(stem),
            i if i <= stages.len() => Ok(stages[i - 1]),
            _ => Err(Error::config(format!("fuser selects missing stage {i}"))),
        }
    };
    let input = match &cfg.variant {
        FuserVariant::Identity => return Ok(last),
        FuserVariant::ConcatStages(sel) | FuserVariant::AddStages(sel) if sel.is_empty() => {
            return Err(Error::config("fuser stage selection is empty"));
        }
        FuserVariant::ConcatStages(sel) => {
            let parts = sel.iter().map(|&i| pick(i)).collect::<Result<Vec<_>>>()?;
            tape.concat_cols(&parts)?
        }
        FuserVariant::AddStages(sel) => {
            let mut acc = pick(sel[0])?;
            for &i in &sel[1..] {
                let next = pick(i)?;
                acc = tape.add(acc, next)?;
            }
            acc
        }
        _ => last,
    };
    let linear = fuser
        .linear
        .as_ref()
        .ok_or_else(|| Error::config(format!("fuser variant {} is missing its linear layer", cfg.variant)))?;
    let mut x = tape.linear(input, linear.weight, linear.bias)?;
    let side = vit.grid_side();
    for b in &fuser.bottlenecks {
        let h = tape.linear(x, b.reduce.weight, b.reduce.bias)?;
        let h = tape.relu(h)?;
        let h = tape.im2col_3x3(h, side, side)?;
        let h = tape.linear(h, b.conv.weight, b.conv.bias)?;
        let h = tape.relu(h)?;
        let h = tape.linear(h, b.expand.weight, b.expand.bias)?;
        x = tape.add(x, h)?;
    }
    for block in &fuser.blocks {
        x = attention_block(tape, block, x, vit)?;
    }
    Ok(x)
}
