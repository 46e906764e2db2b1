//! Language-as-channel-selector fusion.
//!
//! A cell projects the sentence embedding to a per-channel selector, scales
//! the visual feature channel-wise, pushes the selected and the raw feature
//! through two independently searched post-blocks, and sums the results:
//! `f_m = block_a(selector ⊙ f_v) + block_b(f_v)`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockKind, ChoiceBlock};
use crate::error::{Error, Result};
use crate::lang::LANG_DIM;
use crate::store::{Forward, ParamStore};
use crate::tensor::{Element, Tensor, Var};

/// One fusion cell: projection weights plus two searchable post-blocks.
#[derive(Clone, Debug)]
pub struct ModaMixerCell {
    pub prefix: String,
    /// 1-based stage index.
    pub stage: usize,
    pub channels: usize,
    pub block_a: ChoiceBlock,
    pub block_b: ChoiceBlock,
}

/// Post-block behavior: the searched candidate, or a pass-through used by
/// the algebra tests.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PostBlock {
    Searched(BlockKind),
    Identity,
}

impl ModaMixerCell {
    pub fn new(prefix: impl Into<String>, stage: usize, channels: usize) -> Self {
        let prefix = prefix.into();
        Self {
            block_a: ChoiceBlock::new(format!("{prefix}.a"), channels, channels, 1),
            block_b: ChoiceBlock::new(format!("{prefix}.b"), channels, channels, 1),
            prefix,
            stage,
            channels,
        }
    }

    pub fn init_params<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, 1.0 / (LANG_DIM as f64).sqrt()).unwrap();
        let w = Tensor::from_fn(&[self.channels, LANG_DIM], |_| T::from_f64(normal.sample(rng)));
        store.insert(format!("{}.proj.w", self.prefix), w, true);
        // selector centered at one so the mixed path starts near identity
        store.insert(
            format!("{}.proj.b", self.prefix),
            Tensor::ones(&[self.channels]),
            true,
        );
        self.block_a.init_params(store, rng);
        self.block_b.init_params(store, rng);
    }

    /// selector = W·f_l + b for a described sample; fallbacks bypass this.
    pub fn project<T: Element>(&self, fwd: &mut Forward<T>, f_l: Var) -> Result<Var> {
        let (_, d) = fwd.graph.value(f_l).dims2()?;
        if d != LANG_DIM {
            return Err(Error::Dimension(format!(
                "language embedding dim {d} vs projection dim {LANG_DIM}"
            )));
        }
        let w = fwd.param(&format!("{}.proj.w", self.prefix))?;
        let b = fwd.param(&format!("{}.proj.b", self.prefix))?;
        fwd.graph.linear(f_l, w, Some(b))
    }

    /// `f_m = block_a(selector ⊙ f_v) + block_b(f_v)`.
    pub fn mix<T: Element>(
        &self,
        fwd: &mut Forward<T>,
        f_v: Var,
        selector: Var,
        a: PostBlock,
        b: PostBlock,
    ) -> Result<Var> {
        let (_, c, _, _) = fwd.graph.value(f_v).dims4()?;
        if c != self.channels {
            return Err(Error::Dimension(format!(
                "feature channels {c} vs cell channels {}",
                self.channels
            )));
        }
        let mixed = fwd.graph.scale_channels(f_v, selector)?;
        let left = match a {
            PostBlock::Searched(kind) => self.block_a.forward(fwd, mixed, kind)?,
            PostBlock::Identity => mixed,
        };
        let right = match b {
            PostBlock::Searched(kind) => self.block_b.forward(fwd, f_v, kind)?,
            PostBlock::Identity => f_v,
        };
        fwd.graph.add(left, right)
    }
}

/// Channel ranking of one selector, serialized for offline inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorReport {
    pub sequence: String,
    pub frame: usize,
    pub stage: usize,
    pub branch: String,
    /// Channel indices sorted by score, descending; ties keep channel order.
    pub ranked: Vec<usize>,
    pub scores: Vec<f32>,
}

impl SelectorReport {
    pub fn from_scores(
        sequence: impl Into<String>,
        frame: usize,
        stage: usize,
        branch: impl Into<String>,
        scores: Vec<f32>,
    ) -> Self {
        let mut ranked: Vec<usize> = (0..scores.len()).collect();
        ranked.sort_by(|&i, &j| {
            scores[j]
                .partial_cmp(&scores[i])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        Self {
            sequence: sequence.into(),
            frame,
            stage,
            branch: branch.into(),
            ranked,
            scores,
        }
    }

    pub fn max_channel(&self) -> Option<usize> {
        self.ranked.first().copied()
    }

    pub fn min_channel(&self) -> Option<usize> {
        self.ranked.last().copied()
    }
}

/// Write reports as JSON-lines.
pub fn write_selector_reports(path: &Path, reports: &[SelectorReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in reports {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_selector_reports(path: &Path) -> Result<Vec<SelectorReport>> {
    let body = std::fs::read_to_string(path)?;
    body.lines()
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
