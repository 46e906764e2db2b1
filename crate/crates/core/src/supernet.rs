//! Asymmetric two-stream backbone with per-stage fusion cells.
//!
//! Both branches run stem → (stage blocks → mixer) ×4 → 1×1 output conv.
//! Template and search branches own disjoint parameters; the genome picks
//! one candidate per backbone slot and per mixer post-block.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::blocks::{BlockKind, ChoiceBlock};
use crate::error::{Error, Result};
use crate::genome::{Genome, STAGE_BLOCKS};
use crate::geom::BBox;
use crate::lang::{self, FallbackMode, EMBED_PARAM};
use crate::modamixer::{ModaMixerCell, PostBlock};
use crate::store::{init_conv_bn, Forward, ParamStore};
use crate::tensor::{Element, Tensor, Var};

pub const TEMPLATE_SIZE: usize = 64;
pub const SEARCH_SIZE: usize = 160;
pub const STEM_CHANNELS: usize = 16;
pub const OUT_CHANNELS: usize = 256;

#[derive(Copy, Clone, Debug)]
pub struct StagePlan {
    pub stride: usize,
    pub channels: usize,
    pub blocks: usize,
}

pub const STAGE_PLANS: [StagePlan; 4] = [
    StagePlan { stride: 2, channels: 64, blocks: 3 },
    StagePlan { stride: 2, channels: 160, blocks: 3 },
    StagePlan { stride: 1, channels: 320, blocks: 7 },
    StagePlan { stride: 1, channels: 640, blocks: 3 },
];

/// Cumulative stride of the feature map entering the stage-k mixer (0-based).
pub const STAGE_CUM_STRIDE: [usize; 4] = [4, 8, 8, 8];

/// Per-sample source of the channel selector.
#[derive(Clone, Debug)]
pub enum SelectorSource {
    /// Token ids of the description ([CLS] ... [SEP]).
    Description(Vec<usize>),
    /// Exact zero selector, no projection.
    Zero,
    /// Pool the same-stage template feature over this box (template-crop
    /// pixel coordinates).
    TemplatePool(BBox),
}

impl SelectorSource {
    /// Resolve a possibly-missing description against the fallback mode.
    pub fn from_optional_description(
        tokens: Option<Vec<usize>>,
        fallback: FallbackMode,
        template_box: BBox,
    ) -> Self {
        match (tokens, fallback) {
            (Some(t), _) => SelectorSource::Description(t),
            (None, FallbackMode::Zero) => SelectorSource::Zero,
            (None, FallbackMode::TemplatePool) => SelectorSource::TemplatePool(template_box),
        }
    }
}

/// Selector inputs for one branch pass.
pub enum BranchSelectors<'a, T> {
    /// Build selectors in-graph from per-sample sources.
    PerSample(&'a [SelectorSource]),
    /// Precomputed (1,C) vectors per stage, treated as constants.
    Frozen(&'a [Tensor<T>; 4]),
}

/// How mixer post-blocks are chosen.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum MixerPolicy {
    /// Genome mixer genes (the searched configuration).
    Searched,
    /// Reuse the stage's last backbone block choice for both post-blocks.
    FixedLastBlock,
    /// Bypass mixers entirely (vision-only ablation).
    Disabled,
}

struct BranchDef {
    search: bool,
    prefix: &'static str,
    stages: Vec<Vec<ChoiceBlock>>,
    mixers: Vec<ModaMixerCell>,
}

impl BranchDef {
    fn new(search: bool) -> Self {
        let prefix = if search { "s" } else { "t" };
        let mut stages = Vec::new();
        let mut mixers = Vec::new();
        let mut c_prev = STEM_CHANNELS;
        for (si, plan) in STAGE_PLANS.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..plan.blocks {
                let (c_in, stride) = if bi == 0 { (c_prev, plan.stride) } else { (plan.channels, 1) };
                blocks.push(ChoiceBlock::new(
                    format!("{prefix}.stage{}.b{}", si + 1, bi),
                    c_in,
                    plan.channels,
                    stride,
                ));
            }
            stages.push(blocks);
            mixers.push(ModaMixerCell::new(
                format!("{prefix}.mm{}", si + 1),
                si + 1,
                plan.channels,
            ));
            c_prev = plan.channels;
        }
        Self { search, prefix, stages, mixers }
    }

    fn stem_prefix(&self) -> String {
        format!("{}.stem", self.prefix)
    }

    fn out_prefix(&self) -> String {
        format!("{}.out", self.prefix)
    }
}

/// Selector values captured during a forward, for offline reports.
pub struct SelectorTrace {
    pub branch: &'static str,
    pub stage: usize,
    pub values: Var,
}

pub struct SupernetOut {
    pub f_t: Var,
    pub f_s: Var,
    pub selectors: Vec<SelectorTrace>,
}

pub struct Supernet {
    t: BranchDef,
    s: BranchDef,
    vocab_size: usize,
}

impl Supernet {
    pub fn new(vocab_size: usize) -> Self {
        Self { t: BranchDef::new(false), s: BranchDef::new(true), vocab_size }
    }

    pub fn init_params<T: Element>(&self, store: &mut ParamStore<T>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab_rng = &mut rng;
        let table = Tensor::from_fn(&[self.vocab_size, lang::LANG_DIM], |_| {
            use rand_distr::Distribution;
            T::from_f64(rand_distr::Normal::new(0.0, 1.0).unwrap().sample(vocab_rng))
        });
        store.insert(EMBED_PARAM, table, true);
        for branch in [&self.t, &self.s] {
            init_conv_bn(store, &mut rng, &branch.stem_prefix(), STEM_CHANNELS, 3, 3);
            for stage in &branch.stages {
                for blk in stage {
                    blk.init_params(store, &mut rng);
                }
            }
            for mm in &branch.mixers {
                mm.init_params(store, &mut rng);
            }
            init_conv_bn(
                store,
                &mut rng,
                &branch.out_prefix(),
                OUT_CHANNELS,
                STAGE_PLANS[3].channels,
                1,
            );
        }
    }

    /// Parameter-name prefixes on the path selected by `genome`
    /// (stems, output convs, selected candidates, projections, embedding).
    pub fn path_prefixes(&self, genome: &Genome) -> Vec<String> {
        let mut out = vec![EMBED_PARAM.to_string()];
        for branch in [&self.t, &self.s] {
            out.push(branch.stem_prefix());
            out.push(branch.out_prefix());
            for (si, stage) in branch.stages.iter().enumerate() {
                for (bi, blk) in stage.iter().enumerate() {
                    let kind = BlockKind::from_gene(genome.backbone_gene(branch.search, si, bi));
                    out.extend(blk.param_prefixes(kind));
                }
            }
            for (si, mm) in branch.mixers.iter().enumerate() {
                out.push(format!("{}.proj", mm.prefix));
                let ka = BlockKind::from_gene(genome.mixer_gene(branch.search, si, 0));
                let kb = BlockKind::from_gene(genome.mixer_gene(branch.search, si, 1));
                out.extend(mm.block_a.param_prefixes(ka));
                out.extend(mm.block_b.param_prefixes(kb));
            }
        }
        out
    }

    fn build_selector<T: Element>(
        &self,
        fwd: &mut Forward<T>,
        mixer: &ModaMixerCell,
        lang_sources: &[SelectorSource],
        template_stage_feat: Var,
        stage_idx: usize,
    ) -> Result<Var> {
        let stride = STAGE_CUM_STRIDE[stage_idx];
        let mut rows: Vec<Var> = Vec::with_capacity(lang_sources.len());
        for (n, src) in lang_sources.iter().enumerate() {
            let row = match src {
                SelectorSource::Description(tokens) => {
                    let f_l = lang::encode(fwd, tokens)?;
                    mixer.project(fwd, f_l)?
                }
                SelectorSource::Zero => {
                    fwd.graph.constant(Tensor::zeros(&[1, mixer.channels]))
                }
                SelectorSource::TemplatePool(bbox) => {
                    let feat = fwd.graph.slice_batch(template_stage_feat, n, 1)?;
                    let shape = fwd.graph.value(feat).shape().to_vec();
                    let (h, w) = (shape[2], shape[3]);
                    match lang::project_box_to_grid(bbox, stride, h, w) {
                        Some((y0, y1, x0, x1)) => fwd.graph.region_mean(feat, y0, y1, x0, x1)?,
                        None => {
                            log::warn!(
                                "template-pool box empty at stage {}; using global average",
                                stage_idx + 1
                            );
                            fwd.graph.global_avg_pool(feat)?
                        }
                    }
                }
            };
            rows.push(row);
        }
        fwd.graph.stack_rows(&rows)
    }

    fn mixer_blocks(
        &self,
        policy: MixerPolicy,
        genome: &Genome,
        search: bool,
        stage_idx: usize,
    ) -> (PostBlock, PostBlock) {
        match policy {
            MixerPolicy::Searched => (
                PostBlock::Searched(BlockKind::from_gene(genome.mixer_gene(search, stage_idx, 0))),
                PostBlock::Searched(BlockKind::from_gene(genome.mixer_gene(search, stage_idx, 1))),
            ),
            MixerPolicy::FixedLastBlock => {
                let last = STAGE_BLOCKS[stage_idx] - 1;
                let kind = BlockKind::from_gene(genome.backbone_gene(search, stage_idx, last));
                (PostBlock::Searched(kind), PostBlock::Searched(kind))
            }
            MixerPolicy::Disabled => (PostBlock::Identity, PostBlock::Identity),
        }
    }

    /// Run one branch; `template_stage_feats` supplies the pooled-fallback
    /// source (for the template branch itself, its own features, filled as
    /// stages complete).
    #[allow(clippy::too_many_arguments)]
    fn run_branch<T: Element>(
        &self,
        fwd: &mut Forward<T>,
        branch: &BranchDef,
        x: Var,
        sel: &BranchSelectors<'_, T>,
        genome: &Genome,
        policy: MixerPolicy,
        template_stage_feats: Option<&[Var]>,
        selectors: &mut Vec<SelectorTrace>,
    ) -> Result<(Var, Vec<Var>)> {
        let mut h = fwd.conv_bn(x, &branch.stem_prefix(), 2, 1, 1, true)?;
        let mut stage_feats: Vec<Var> = Vec::with_capacity(4);
        for (si, stage) in branch.stages.iter().enumerate() {
            for (bi, blk) in stage.iter().enumerate() {
                let kind = BlockKind::from_gene(genome.backbone_gene(branch.search, si, bi));
                h = blk.forward(fwd, h, kind)?;
            }
            stage_feats.push(h);
            if policy == MixerPolicy::Disabled {
                continue;
            }
            let mixer = &branch.mixers[si];
            let selector = match sel {
                BranchSelectors::PerSample(lang_sources) => {
                    let pool_src = match template_stage_feats {
                        Some(feats) => feats[si],
                        None => h,
                    };
                    self.build_selector(fwd, mixer, lang_sources, pool_src, si)?
                }
                BranchSelectors::Frozen(per_stage) => {
                    fwd.graph.constant(per_stage[si].clone())
                }
            };
            selectors.push(SelectorTrace {
                branch: if branch.search { "search" } else { "template" },
                stage: si + 1,
                values: selector,
            });
            let (a, b) = self.mixer_blocks(policy, genome, branch.search, si);
            h = mixer.mix(fwd, h, selector, a, b)?;
        }
        let out = fwd.conv_bn(h, &branch.out_prefix(), 1, 0, 1, true)?;
        Ok((out, stage_feats))
    }

    /// Template branch alone. Returns the 256-channel feature, the raw
    /// per-stage features (pool-fallback sources), and selector traces.
    pub fn forward_template<T: Element>(
        &self,
        fwd: &mut Forward<T>,
        template: &Tensor<T>,
        lang_sources: &[SelectorSource],
        genome: &Genome,
        policy: MixerPolicy,
    ) -> Result<(Var, Vec<Var>, Vec<SelectorTrace>)> {
        let x_t = fwd.graph.constant(template.clone());
        let mut selectors = Vec::new();
        let (f_t, feats) = self.run_branch(
            fwd,
            &self.t,
            x_t,
            &BranchSelectors::PerSample(lang_sources),
            genome,
            policy,
            None,
            &mut selectors,
        )?;
        Ok((f_t, feats, selectors))
    }

    /// Search branch with per-stage selector vectors fixed up front
    /// (per-sequence inference path).
    pub fn forward_search_frozen<T: Element>(
        &self,
        fwd: &mut Forward<T>,
        search: &Tensor<T>,
        frozen: &[Tensor<T>; 4],
        genome: &Genome,
        policy: MixerPolicy,
    ) -> Result<Var> {
        let x_s = fwd.graph.constant(search.clone());
        let mut selectors = Vec::new();
        let (f_s, _) = self.run_branch(
            fwd,
            &self.s,
            x_s,
            &BranchSelectors::Frozen(frozen),
            genome,
            policy,
            None,
            &mut selectors,
        )?;
        Ok(f_s)
    }

    /// Selector vectors the search branch would use, evaluated in the given
    /// forward (the template stage features must come from the same graph).
    pub fn search_selectors<T: Element>(
        &self,
        fwd: &mut Forward<T>,
        lang_sources: &[SelectorSource],
        template_stage_feats: &[Var],
        genome: &Genome,
    ) -> Result<[Tensor<T>; 4]> {
        let _ = genome;
        let mut out: Vec<Tensor<T>> = Vec::with_capacity(4);
        for si in 0..4 {
            let v = self.build_selector(
                fwd,
                &self.s.mixers[si],
                lang_sources,
                template_stage_feats[si],
                si,
            )?;
            out.push(fwd.graph.value(v).clone());
        }
        Ok(out.try_into().expect("four stages"))
    }

    /// Full two-branch forward.
    ///
    /// `template`/`search` are (N,3,H,W) image batches; `lang_sources` has
    /// one entry per sample. Returns 256-channel feature vars for both
    /// branches plus the selector traces.
    pub fn forward<T: Element>(
        &self,
        fwd: &mut Forward<T>,
        template: &Tensor<T>,
        search: &Tensor<T>,
        lang_sources: &[SelectorSource],
        genome: &Genome,
        policy: MixerPolicy,
    ) -> Result<SupernetOut> {
        let (nt, ct, _, _) = template.dims4()?;
        let (ns, cs, _, _) = search.dims4()?;
        if nt != ns || ct != 3 || cs != 3 {
            return Err(Error::Dimension(format!(
                "expected matching RGB batches, got template ({nt},{ct}), search ({ns},{cs})"
            )));
        }
        if lang_sources.len() != nt {
            return Err(Error::Dimension(format!(
                "{} language sources for batch of {nt}",
                lang_sources.len()
            )));
        }
        let x_t = fwd.graph.constant(template.clone());
        let x_s = fwd.graph.constant(search.clone());
        let mut selectors = Vec::new();
        let (f_t, t_feats) = self.run_branch(
            fwd,
            &self.t,
            x_t,
            &BranchSelectors::PerSample(lang_sources),
            genome,
            policy,
            None,
            &mut selectors,
        )?;
        let (f_s, _) = self.run_branch(
            fwd,
            &self.s,
            x_s,
            &BranchSelectors::PerSample(lang_sources),
            genome,
            policy,
            Some(&t_feats),
            &mut selectors,
        )?;
        Ok(SupernetOut { f_t, f_s, selectors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::Vocabulary;
    use crate::tensor::Mode;

    fn small_batch<T: Element>(n: usize) -> (Tensor<T>, Tensor<T>) {
        let t = Tensor::from_fn(&[n, 3, TEMPLATE_SIZE, TEMPLATE_SIZE], |i| {
            T::from_f64(((i % 97) as f64) / 97.0)
        });
        let s = Tensor::from_fn(&[n, 3, SEARCH_SIZE, SEARCH_SIZE], |i| {
            T::from_f64(((i % 89) as f64) / 89.0)
        });
        (t, s)
    }

    fn built_store(seed: u64) -> (Supernet, ParamStore<f32>, Vocabulary) {
        let vocab = Vocabulary::default_world();
        let net = Supernet::new(vocab.len());
        let mut store = ParamStore::new();
        net.init_params(&mut store, seed);
        (net, store, vocab)
    }

    #[test]
    fn forward_output_shapes_follow_stride_plan() {
        let (net, store, vocab) = built_store(0);
        let (t, s) = small_batch::<f32>(1);
        let lang = vec![SelectorSource::Description(vocab.tokenize("the small red square"))];
        let mut fwd = Forward::new(&store, Mode::Eval);
        let out = net
            .forward(&mut fwd, &t, &s, &lang, &Genome::paper_preset(), MixerPolicy::Searched)
            .unwrap();
        assert_eq!(fwd.graph.value(out.f_t).shape(), &[1, 256, 8, 8]);
        assert_eq!(fwd.graph.value(out.f_s).shape(), &[1, 256, 20, 20]);
        assert_eq!(out.selectors.len(), 8);
    }

    #[test]
    fn search_gene_change_leaves_template_features_identical() {
        let (net, store, _) = built_store(1);
        let (t, s) = small_batch::<f32>(1);
        let lang = vec![SelectorSource::Zero];
        let mut g1 = Genome::paper_preset();
        let mut g2 = g1.clone();
        // flip a search-backbone gene only
        let old = g1.gene(20);
        g2.set_gene(20, (old + 1) % 4);
        let run = |genome: &Genome| {
            let mut fwd = Forward::new(&store, Mode::Eval);
            let out = net
                .forward(&mut fwd, &t, &s, &lang, genome, MixerPolicy::Searched)
                .unwrap();
            fwd.graph.value(out.f_t).data().to_vec()
        };
        assert_eq!(run(&g1), run(&g2));
        g1.set_gene(20, old); // keep clippy quiet about unused mutation
    }

    #[test]
    fn zero_output_conv_zeroes_template_features() {
        let (net, mut store, _) = built_store(2);
        for name in ["t.out.conv.w", "t.out.bn.gamma", "t.out.bn.beta"] {
            let e = store.get_mut(name).unwrap();
            e.value = Tensor::zeros(e.value.shape());
        }
        let (t, s) = small_batch::<f32>(1);
        let mut fwd = Forward::new(&store, Mode::Eval);
        let out = net
            .forward(
                &mut fwd,
                &t,
                &s,
                &[SelectorSource::Zero],
                &Genome::paper_preset(),
                MixerPolicy::Searched,
            )
            .unwrap();
        assert!(fwd.graph.value(out.f_t).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroing_template_branch_leaves_search_features_unchanged() {
        let (net, mut store, vocab) = built_store(3);
        let (t, s) = small_batch::<f32>(1);
        let lang = vec![SelectorSource::Description(vocab.tokenize("the large blue circle"))];
        let genome = Genome::paper_preset();
        let run = |store: &ParamStore<f32>| {
            let mut fwd = Forward::new(store, Mode::Eval);
            let out = net
                .forward(&mut fwd, &t, &s, &lang, &genome, MixerPolicy::Searched)
                .unwrap();
            fwd.graph.value(out.f_s).data().to_vec()
        };
        let before = run(&store);
        let names: Vec<String> = store
            .iter()
            .filter(|(k, _)| k.starts_with("t."))
            .map(|(k, _)| k.clone())
            .collect();
        for name in names {
            let e = store.get_mut(&name).unwrap();
            e.value = Tensor::zeros(e.value.shape());
        }
        let after = run(&store);
        assert_eq!(before, after);
    }

    #[test]
    fn description_value_changes_search_features_but_zero_mode_ignores_it() {
        let (net, store, vocab) = built_store(4);
        let (t, s) = small_batch::<f32>(1);
        let genome = Genome::paper_preset();
        let run = |lang: &[SelectorSource]| {
            let mut fwd = Forward::new(&store, Mode::Eval);
            let out = net
                .forward(&mut fwd, &t, &s, lang, &genome, MixerPolicy::Searched)
                .unwrap();
            fwd.graph.value(out.f_s).data().to_vec()
        };
        let red = run(&[SelectorSource::Description(vocab.tokenize("the small red square"))]);
        let blue = run(&[SelectorSource::Description(vocab.tokenize("the large blue circle"))]);
        assert_ne!(red, blue, "descriptions must steer features");
        let z1 = run(&[SelectorSource::Zero]);
        let z2 = run(&[SelectorSource::Zero]);
        assert_eq!(z1, z2);
    }

    #[test]
    fn gradient_reaches_embedding_table_through_projection() {
        let (net, store, vocab) = built_store(5);
        let store64 = store.cast::<f64>();
        let (t, s) = small_batch::<f64>(1);
        let tokens = vocab.tokenize("the small red square");
        let used: std::collections::BTreeSet<usize> = tokens.iter().copied().collect();
        let lang = vec![SelectorSource::Description(tokens)];
        let mut fwd = Forward::new(&store64, Mode::Train);
        let out = net
            .forward(&mut fwd, &t, &s, &lang, &Genome::paper_preset(), MixerPolicy::Searched)
            .unwrap();
        let sq = fwd.graph.mul(out.f_s, out.f_s).unwrap();
        let loss = fwd.graph.mean_all(sq);
        fwd.graph.backward(loss).unwrap();
        let grads = fwd.collect_grads();
        let g = &grads[EMBED_PARAM];
        let d = crate::lang::LANG_DIM;
        for &row in &used {
            let norm: f64 = g.data()[row * d..(row + 1) * d].iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "used vocabulary row {row} received no gradient");
        }
        let unused = (0..vocab.len()).find(|i| !used.contains(i)).unwrap();
        let norm: f64 = g.data()[unused * d..(unused + 1) * d].iter().map(|v| v * v).sum();
        assert_eq!(norm, 0.0, "unused vocabulary row must stay untouched");
    }
}
