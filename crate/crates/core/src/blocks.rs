//! Candidate building blocks for every searchable slot.
//!
//! Each slot holds four parallel candidates sharing input/output shape:
//! shuffle blocks with depthwise kernel 3/5/7 and a three-stage depthwise-
//! separable variant with kernel 3. Only the gene-selected candidate runs.
//!
//! Constant-channel stride-1 slots use the split/concat/shuffle unit; slots
//! that change channels or stride use the two-branch downsampling unit with
//! a strided depthwise shortcut.

use rand::Rng;

use crate::error::Result;
use crate::store::{init_bn, init_conv_bn, Forward, ParamStore};
use crate::tensor::{Element, Var};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Shuffle3,
    Shuffle5,
    Shuffle7,
    Xception3,
}

impl BlockKind {
    pub fn from_gene(gene: u8) -> Self {
        match gene {
            0 => BlockKind::Shuffle3,
            1 => BlockKind::Shuffle5,
            2 => BlockKind::Shuffle7,
            3 => BlockKind::Xception3,
            _ => unreachable!("genes are validated to 0..4"),
        }
    }

    pub fn gene(self) -> u8 {
        match self {
            BlockKind::Shuffle3 => 0,
            BlockKind::Shuffle5 => 1,
            BlockKind::Shuffle7 => 2,
            BlockKind::Xception3 => 3,
        }
    }

    pub fn kernel(self) -> usize {
        match self {
            BlockKind::Shuffle3 | BlockKind::Xception3 => 3,
            BlockKind::Shuffle5 => 5,
            BlockKind::Shuffle7 => 7,
        }
    }

    pub fn all() -> [BlockKind; 4] {
        [
            BlockKind::Shuffle3,
            BlockKind::Shuffle5,
            BlockKind::Shuffle7,
            BlockKind::Xception3,
        ]
    }
}

/// One searchable slot: four candidate blocks behind a common shape contract.
#[derive(Clone, Debug)]
pub struct ChoiceBlock {
    pub prefix: String,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl ChoiceBlock {
    pub fn new(prefix: impl Into<String>, c_in: usize, c_out: usize, stride: usize) -> Self {
        assert!(c_out % 2 == 0, "block output channels must be even");
        Self { prefix: prefix.into(), c_in, c_out, stride }
    }

    fn is_transition(&self) -> bool {
        self.c_in != self.c_out || self.stride != 1
    }

    fn cand_prefix(&self, kind: BlockKind) -> String {
        format!("{}.c{}", self.prefix, kind.gene())
    }

    pub fn init_params<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for kind in BlockKind::all() {
            let p = self.cand_prefix(kind);
            let half = self.c_out / 2;
            let main_in = if self.is_transition() { self.c_in } else { half };
            if self.is_transition() {
                init_conv_bn(store, rng, &format!("{p}.sc.dw"), self.c_in, 1, 3);
                init_conv_bn(store, rng, &format!("{p}.sc.pw"), half, self.c_in, 1);
            }
            match kind {
                BlockKind::Shuffle3 | BlockKind::Shuffle5 | BlockKind::Shuffle7 => {
                    let k = kind.kernel();
                    init_conv_bn(store, rng, &format!("{p}.m.pw1"), half, main_in, 1);
                    init_conv_bn(store, rng, &format!("{p}.m.dw"), half, 1, k);
                    init_conv_bn(store, rng, &format!("{p}.m.pw2"), half, half, 1);
                }
                BlockKind::Xception3 => {
                    init_conv_bn(store, rng, &format!("{p}.m.dw1"), main_in, 1, 3);
                    init_conv_bn(store, rng, &format!("{p}.m.pw1"), half, main_in, 1);
                    init_conv_bn(store, rng, &format!("{p}.m.dw2"), half, 1, 3);
                    init_conv_bn(store, rng, &format!("{p}.m.pw2"), half, half, 1);
                    init_conv_bn(store, rng, &format!("{p}.m.dw3"), half, 1, 3);
                    init_conv_bn(store, rng, &format!("{p}.m.pw3"), half, half, 1);
                }
            }
        }
    }

    /// Conv parameter names of one candidate (used by path bookkeeping).
    pub fn param_prefixes(&self, kind: BlockKind) -> Vec<String> {
        let p = self.cand_prefix(kind);
        let mut out = Vec::new();
        if self.is_transition() {
            out.push(format!("{p}.sc.dw"));
            out.push(format!("{p}.sc.pw"));
        }
        match kind {
            BlockKind::Xception3 => {
                for s in ["m.dw1", "m.pw1", "m.dw2", "m.pw2", "m.dw3", "m.pw3"] {
                    out.push(format!("{p}.{s}"));
                }
            }
            _ => {
                for s in ["m.pw1", "m.dw", "m.pw2"] {
                    out.push(format!("{p}.{s}"));
                }
            }
        }
        out
    }

    fn main_branch<T: Element>(
        &self,
        fwd: &mut Forward<T>,
        x: Var,
        kind: BlockKind,
        main_in: usize,
    ) -> Result<Var> {
        let p = self.cand_prefix(kind);
        let half = self.c_out / 2;
        match kind {
            BlockKind::Shuffle3 | BlockKind::Shuffle5 | BlockKind::Shuffle7 => {
                let k = kind.kernel();
                let h = fwd.conv_bn(x, &format!("{p}.m.pw1"), 1, 0, 1, true)?;
                let h = fwd.conv_bn(h, &format!("{p}.m.dw"), self.stride, k / 2, half, false)?;
                fwd.conv_bn(h, &format!("{p}.m.pw2"), 1, 0, 1, true)
            }
            BlockKind::Xception3 => {
                let h = fwd.conv_bn(x, &format!("{p}.m.dw1"), self.stride, 1, main_in, false)?;
                let h = fwd.conv_bn(h, &format!("{p}.m.pw1"), 1, 0, 1, true)?;
                let h = fwd.conv_bn(h, &format!("{p}.m.dw2"), 1, 1, half, false)?;
                let h = fwd.conv_bn(h, &format!("{p}.m.pw2"), 1, 0, 1, true)?;
                let h = fwd.conv_bn(h, &format!("{p}.m.dw3"), 1, 1, half, false)?;
                fwd.conv_bn(h, &format!("{p}.m.pw3"), 1, 0, 1, true)
            }
        }
    }

    pub fn forward<T: Element>(&self, fwd: &mut Forward<T>, x: Var, kind: BlockKind) -> Result<Var> {
        let p = self.cand_prefix(kind);
        let y = if self.is_transition() {
            let sc = fwd.conv_bn(x, &format!("{p}.sc.dw"), self.stride, 1, self.c_in, false)?;
            let sc = fwd.conv_bn(sc, &format!("{p}.sc.pw"), 1, 0, 1, true)?;
            let main = self.main_branch(fwd, x, kind, self.c_in)?;
            fwd.graph.concat_c(&[sc, main])?
        } else {
            let (left, right) = fwd.graph.split_c_half(x)?;
            let main = self.main_branch(fwd, right, kind, self.c_out / 2)?;
            fwd.graph.concat_c(&[left, main])?
        };
        fwd.graph.channel_shuffle(y, 2)
    }
}

/// Stem and output convolutions share this conv+bn+relu shape.
pub fn init_conv_block<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) {
    init_conv_bn(store, rng, prefix, c_out, c_in, k);
}

/// Identity-initialized batch norm parameters for standalone use.
pub fn init_plain_bn<T: Element>(store: &mut ParamStore<T>, prefix: &str, c: usize) {
    init_bn(store, prefix, c);
}
