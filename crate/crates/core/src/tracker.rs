//! Matching head and the frame-by-frame inference loop: depthwise
//! cross-correlation, classification/centerness/regression towers, the
//! anchor-free loss, and argmax decoding.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::crop::{crop_resize, search_window, template_window};
use crate::error::{Error, Result};
use crate::genome::Genome;
use crate::geom::{BBox, Window};
use crate::lang::FallbackMode;
use crate::modamixer::SelectorReport;
use crate::store::{init_conv_bn, Forward, ParamStore};
use crate::supernet::{MixerPolicy, SelectorSource, Supernet, SEARCH_SIZE, TEMPLATE_SIZE};
use crate::synth::TrackSequence;
use crate::tensor::{Element, Mode, Tensor, Var};

/// Response-map side: 20 - 8 + 1.
pub const CORR_SIZE: usize = 13;
pub const HEAD_CHANNELS: usize = 128;
pub const FEATURE_STRIDE: usize = 8;
/// Window pixel of response cell 0 along each axis: the template center
/// sits 4 feature cells into the search map.
pub const CELL_OFFSET: f32 = 32.0;

/// Language policy for an inference run.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LangMode {
    /// Encode the sequence description.
    Description,
    /// Zero selector everywhere.
    Zero,
    /// Pool the template feature over the target box.
    TemplatePool,
}

impl std::str::FromStr for LangMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "description" | "desc" => Ok(LangMode::Description),
            "zero" => Ok(LangMode::Zero),
            "template_pool" | "template" | "pool" => Ok(LangMode::TemplatePool),
            other => Err(Error::Config(format!("unknown lang mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for LangMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LangMode::Description => "description",
            LangMode::Zero => "zero",
            LangMode::TemplatePool => "template_pool",
        };
        f.write_str(s)
    }
}

/// Localization head: two conv towers over the correlation volume.
pub struct TrackHead;

impl TrackHead {
    pub fn init_params<T: Element>(store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for tower in ["cls", "reg"] {
            init_conv_bn(store, rng, &format!("head.{tower}.conv1"), HEAD_CHANNELS, 256, 3);
            init_conv_bn(store, rng, &format!("head.{tower}.conv2"), HEAD_CHANNELS, HEAD_CHANNELS, 3);
            init_conv_bn(store, rng, &format!("head.{tower}.conv3"), HEAD_CHANNELS, HEAD_CHANNELS, 3);
        }
        // zero-init output layers; a negative cls prior keeps early maps quiet
        store.insert("head.cls.logit.w", Tensor::zeros(&[1, HEAD_CHANNELS, 1, 1]), true);
        store.insert("head.cls.logit.b", Tensor::full(&[1], T::from_f64(-2.0)), true);
        store.insert("head.ctr.logit.w", Tensor::zeros(&[1, HEAD_CHANNELS, 1, 1]), true);
        store.insert("head.ctr.logit.b", Tensor::zeros(&[1]), true);
        store.insert("head.reg.out.w", Tensor::zeros(&[4, HEAD_CHANNELS, 1, 1]), true);
        store.insert("head.reg.out.b", Tensor::zeros(&[4]), true);
    }

    fn tower<T: Element>(&self, fwd: &mut Forward<T>, x: Var, name: &str) -> Result<Var> {
        let h = fwd.conv_bn(x, &format!("head.{name}.conv1"), 1, 1, 1, true)?;
        let h = fwd.conv_bn(h, &format!("head.{name}.conv2"), 1, 1, 1, true)?;
        fwd.conv_bn(h, &format!("head.{name}.conv3"), 1, 1, 1, true)
    }

    /// corr (N,256,R,R) -> cls (N,1,R,R), ctr (N,1,R,R), reg (N,4,R,R);
    /// reg passes through exp so distances stay positive.
    pub fn forward<T: Element>(&self, fwd: &mut Forward<T>, corr: Var) -> Result<(Var, Var, Var)> {
        let cls_feat = self.tower(fwd, corr, "cls")?;
        let reg_feat = self.tower(fwd, corr, "reg")?;
        let wc = fwd.param("head.cls.logit.w")?;
        let bc = fwd.param("head.cls.logit.b")?;
        let cls = fwd.graph.conv2d(cls_feat, wc, Some(bc), 1, 0, 1)?;
        let wt = fwd.param("head.ctr.logit.w")?;
        let bt = fwd.param("head.ctr.logit.b")?;
        let ctr = fwd.graph.conv2d(cls_feat, wt, Some(bt), 1, 0, 1)?;
        let wr = fwd.param("head.reg.out.w")?;
        let br = fwd.param("head.reg.out.b")?;
        let reg_pre = fwd.graph.conv2d(reg_feat, wr, Some(br), 1, 0, 1)?;
        let reg = fwd.graph.exp(reg_pre);
        Ok((cls, ctr, reg))
    }
}

/// Supernet backbone plus matching head.
pub struct TrackModel {
    pub supernet: Supernet,
    pub head: TrackHead,
}

pub struct ModelOut {
    pub cls: Var,
    pub ctr: Var,
    pub reg: Var,
    pub selectors: Vec<crate::supernet::SelectorTrace>,
}

impl TrackModel {
    pub fn new(vocab_size: usize) -> Self {
        Self { supernet: Supernet::new(vocab_size), head: TrackHead }
    }

    pub fn init_params<T: Element>(&self, store: &mut ParamStore<T>, seed: u64) {
        self.supernet.init_params(store, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4EAD);
        TrackHead::init_params(store, &mut rng);
    }

    /// Full forward: both branches, correlation, head.
    pub fn forward<T: Element>(
        &self,
        fwd: &mut Forward<T>,
        template: &Tensor<T>,
        search: &Tensor<T>,
        lang_sources: &[SelectorSource],
        genome: &Genome,
        policy: MixerPolicy,
    ) -> Result<ModelOut> {
        let out = self
            .supernet
            .forward(fwd, template, search, lang_sources, genome, policy)?;
        let corr = fwd.graph.dw_xcorr(out.f_s, out.f_t)?;
        let (cls, ctr, reg) = self.head.forward(fwd, corr)?;
        Ok(ModelOut { cls, ctr, reg, selectors: out.selectors })
    }

    /// Parameter prefixes of the head (always on the trained path).
    pub fn head_prefixes() -> Vec<String> {
        let mut v = Vec::new();
        for tower in ["cls", "reg"] {
            for conv in ["conv1", "conv2", "conv3"] {
                v.push(format!("head.{tower}.{conv}"));
            }
        }
        for out in ["cls.logit", "ctr.logit", "reg.out"] {
            v.push(format!("head.{out}"));
        }
        v
    }
}

/// Single-sample response maps extracted from a forward.
#[derive(Clone, Debug)]
pub struct ResponseMaps {
    pub cls: Tensor<f32>, // (1,R,R) logits
    pub ctr: Tensor<f32>, // (1,R,R) logits
    pub reg: Tensor<f32>, // (4,R,R) distances in cell units
}

impl ResponseMaps {
    pub fn from_vars(fwd: &Forward<f32>, cls: Var, ctr: Var, reg: Var) -> Result<Self> {
        let take = |v: Var, ch: usize| -> Result<Tensor<f32>> {
            let t = fwd.graph.value(v);
            let (n, c, h, w) = t.dims4()?;
            if n != 1 || c != ch {
                return Err(Error::Dimension(format!(
                    "expected (1,{ch},R,R), got {:?}",
                    t.shape()
                )));
            }
            Tensor::new(vec![c, h, w], t.data().to_vec())
        };
        Ok(Self { cls: take(cls, 1)?, ctr: take(ctr, 1)?, reg: take(reg, 4)? })
    }
}

/// p = sigmoid(cls) ⊙ sigmoid(ctr); argmax cell (row-major first on ties)
/// decodes to a frame-space box via the window geometry.
pub fn decode(maps: &ResponseMaps, window: &Window) -> Result<(BBox, f64)> {
    let shape = maps.cls.shape();
    let (r_rows, r_cols) = (shape[1], shape[2]);
    let rr = r_rows * r_cols;
    let sig = |x: f32| 1.0 / (1.0 + (-x).exp());
    let mut best = f32::NEG_INFINITY;
    let mut best_cell = 0usize;
    for cell in 0..rr {
        let p = sig(maps.cls.data()[cell]) * sig(maps.ctr.data()[cell]);
        if p > best {
            best = p;
            best_cell = cell;
        }
    }
    let (row, col) = (best_cell / r_cols, best_cell % r_cols);
    let px = CELL_OFFSET + col as f32 * FEATURE_STRIDE as f32;
    let py = CELL_OFFSET + row as f32 * FEATURE_STRIDE as f32;
    let s = FEATURE_STRIDE as f32;
    let l = maps.reg.data()[best_cell] * s;
    let t = maps.reg.data()[rr + best_cell] * s;
    let r = maps.reg.data()[2 * rr + best_cell] * s;
    let b = maps.reg.data()[3 * rr + best_cell] * s;
    let win_box = BBox::new(
        px + (r - l) * 0.5,
        py + (b - t) * 0.5,
        (l + r).max(1e-3),
        (t + b).max(1e-3),
    );
    Ok((window.window_to_frame(&win_box), best as f64))
}

/// Loss configuration; the regression term carries triple weight.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub reg_weight: f64,
    /// Fraction of the gt box counted as positive cells.
    pub center_fraction: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { reg_weight: 3.0, center_fraction: 0.6 }
    }
}

/// Centerness target from cell-relative distances.
pub fn centerness(l: f32, t: f32, r: f32, b: f32) -> f32 {
    let wl = l.min(r) / l.max(r).max(1e-12);
    let tb = t.min(b) / t.max(b).max(1e-12);
    (wl * tb).sqrt()
}

/// Anchor-free tracking loss: balanced BCE on classification, BCE on
/// centerness over positive cells, IoU loss on regression; total =
/// cls + ctr + reg_weight * reg.
pub fn tracking_loss<T: Element>(
    fwd: &mut Forward<T>,
    cls: Var,
    ctr: Var,
    reg: Var,
    gt_windows: &[BBox],
    cfg: &LossConfig,
) -> Result<Var> {
    let (n, _, rows, cols) = fwd.graph.value(cls).dims4()?;
    if gt_windows.len() != n {
        return Err(Error::Dimension(format!(
            "{} gt boxes for batch of {n}",
            gt_windows.len()
        )));
    }
    let rr = rows * cols;
    let inv_n = 1.0 / n as f64;
    let mut cls_t = Tensor::<T>::zeros(&[n, 1, rows, cols]);
    let mut cls_w = Tensor::<T>::zeros(&[n, 1, rows, cols]);
    let mut ctr_t = Tensor::<T>::zeros(&[n, 1, rows, cols]);
    let mut ctr_w = Tensor::<T>::zeros(&[n, 1, rows, cols]);
    let mut reg_t = Tensor::<T>::zeros(&[n, 4, rows, cols]);
    let mut reg_w = Tensor::<T>::zeros(&[n, rows, cols]);

    for (ni, gt) in gt_windows.iter().enumerate() {
        if gt.x2() <= 0.0 || gt.y2() <= 0.0 || gt.x1() >= SEARCH_SIZE as f32 || gt.y1() >= SEARCH_SIZE as f32 {
            return Err(Error::Dimension(
                "ground-truth box does not intersect the search window".into(),
            ));
        }
        let mut positives = Vec::new();
        for row in 0..rows {
            for col in 0..cols {
                let px = CELL_OFFSET + col as f32 * FEATURE_STRIDE as f32;
                let py = CELL_OFFSET + row as f32 * FEATURE_STRIDE as f32;
                let in_center = (px - gt.cx).abs() <= gt.w * 0.5 * cfg.center_fraction
                    && (py - gt.cy).abs() <= gt.h * 0.5 * cfg.center_fraction;
                if in_center {
                    positives.push((row, col, px, py));
                }
            }
        }
        let n_pos = positives.len();
        let n_neg = rr - n_pos;
        if n_pos == 0 {
            log::warn!("no positive cells for sample {ni}; classification-only loss");
        }
        for row in 0..rows {
            for col in 0..cols {
                let cell = ni * rr + row * cols + col;
                let is_pos = positives.iter().any(|&(r, c, _, _)| r == row && c == col);
                cls_t.data_mut()[cell] = if is_pos { T::one() } else { T::zero() };
                cls_w.data_mut()[cell] = if is_pos {
                    T::from_f64(0.5 / n_pos as f64 * inv_n)
                } else {
                    T::from_f64(0.5 / n_neg.max(1) as f64 * inv_n)
                };
            }
        }
        if n_pos == 0 {
            // double the negative side so the sample still contributes a
            // full classification term
            for row in 0..rows {
                for col in 0..cols {
                    let cell = ni * rr + row * cols + col;
                    cls_w.data_mut()[cell] = T::from_f64(1.0 / rr as f64 * inv_n);
                }
            }
            continue;
        }
        let s = FEATURE_STRIDE as f32;
        for &(row, col, px, py) in &positives {
            let cell = row * cols + col;
            let l = (px - gt.x1()) / s;
            let t = (py - gt.y1()) / s;
            let r = (gt.x2() - px) / s;
            let b = (gt.y2() - py) / s;
            ctr_t.data_mut()[ni * rr + cell] = T::from_f64(centerness(l, t, r, b) as f64);
            ctr_w.data_mut()[ni * rr + cell] = T::from_f64(1.0 / n_pos as f64 * inv_n);
            let base = ni * 4 * rr;
            reg_t.data_mut()[base + cell] = T::from_f64(l as f64);
            reg_t.data_mut()[base + rr + cell] = T::from_f64(t as f64);
            reg_t.data_mut()[base + 2 * rr + cell] = T::from_f64(r as f64);
            reg_t.data_mut()[base + 3 * rr + cell] = T::from_f64(b as f64);
            reg_w.data_mut()[ni * rr + cell] = T::from_f64(1.0 / n_pos as f64 * inv_n);
        }
    }

    let cls_loss = fwd.graph.bce_with_logits(cls, &cls_t, &cls_w)?;
    let ctr_loss = fwd.graph.bce_with_logits(ctr, &ctr_t, &ctr_w)?;
    let reg_loss = fwd.graph.iou_loss(reg, &reg_t, &reg_w)?;
    let partial = fwd.graph.add(cls_loss, ctr_loss)?;
    let weighted_reg = fwd.graph.scale(reg_loss, cfg.reg_weight);
    fwd.graph.add(partial, weighted_reg)
}

/// Result of tracking one sequence.
pub struct TrackResult {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    pub selectors: Vec<SelectorReport>,
}

/// Per-sequence state prepared once from frame 0.
struct TrackState {
    f_t: Tensor<f32>,
    frozen_selectors: [Tensor<f32>; 4],
    template_selectors: Vec<(usize, Vec<f32>)>, // (stage, values)
    search_selector_values: Vec<(usize, Vec<f32>)>,
    window_side: f32,
}

fn prepare_state(
    model: &TrackModel,
    store: &ParamStore<f32>,
    genome: &Genome,
    seq: &TrackSequence,
    lang_mode: LangMode,
    vocab: &crate::lang::Vocabulary,
    policy: MixerPolicy,
) -> Result<TrackState> {
    let gt0 = seq.gt[0];
    let tw = template_window(&gt0, TEMPLATE_SIZE);
    let template = crop_resize(&seq.frames[0], &tw)?;
    let template_batch = crate::crop::stack_batch(&[template])?;
    let template_box = tw.frame_to_window(&gt0);

    let source = match lang_mode {
        LangMode::Description => {
            SelectorSource::Description(vocab.tokenize(&seq.description))
        }
        LangMode::Zero => SelectorSource::Zero,
        LangMode::TemplatePool => SelectorSource::TemplatePool(template_box),
    };
    let sources = vec![source];

    let mut fwd = Forward::new(store, Mode::Eval);
    let (f_t, t_feats, t_traces) =
        model
            .supernet
            .forward_template(&mut fwd, &template_batch, &sources, genome, policy)?;
    let frozen = model
        .supernet
        .search_selectors(&mut fwd, &sources, &t_feats, genome)?;

    let template_selectors = t_traces
        .iter()
        .map(|tr| {
            (
                tr.stage,
                fwd.graph.value(tr.values).data().iter().map(|v| *v).collect(),
            )
        })
        .collect();
    let search_selector_values = frozen
        .iter()
        .enumerate()
        .map(|(si, t)| (si + 1, t.data().to_vec()))
        .collect();

    Ok(TrackState {
        f_t: fwd.graph.value(f_t).clone(),
        frozen_selectors: frozen,
        template_selectors,
        search_selector_values,
        window_side: crate::crop::SEARCH_CONTEXT * gt0.scale(),
    })
}

/// Track a sequence: fixed frame-0 template, per-frame search window
/// centered on the previous prediction, argmax decoding, fixed window scale.
pub fn track_sequence(
    model: &TrackModel,
    store: &ParamStore<f32>,
    genome: &Genome,
    seq: &TrackSequence,
    lang_mode: LangMode,
    vocab: &crate::lang::Vocabulary,
    policy: MixerPolicy,
    seq_name: &str,
) -> Result<TrackResult> {
    if seq.frames.is_empty() {
        return Err(Error::Config("cannot track an empty sequence".into()));
    }
    let state = prepare_state(model, store, genome, seq, lang_mode, vocab, policy)?;
    let frame_h = seq.frames[0].shape()[1] as f32;
    let frame_w = seq.frames[0].shape()[2] as f32;

    let mut boxes = Vec::with_capacity(seq.frames.len());
    let mut scores = Vec::with_capacity(seq.frames.len());
    let mut selectors = Vec::new();
    let (mut cx, mut cy) = (seq.gt[0].cx, seq.gt[0].cy);

    let f_t_batch = {
        let shape = state.f_t.shape().to_vec();
        state.f_t.reshape(shape)? // already (1,256,8,8)
    };

    for (k, frame) in seq.frames.iter().enumerate() {
        cx = cx.clamp(0.0, frame_w);
        cy = cy.clamp(0.0, frame_h);
        let win = search_window(cx, cy, state.window_side / crate::crop::SEARCH_CONTEXT, SEARCH_SIZE);
        let crop = crop_resize(frame, &win)?;
        let search_batch = crate::crop::stack_batch(&[crop])?;

        let mut fwd = Forward::new(store, Mode::Eval);
        let f_s = model.supernet.forward_search_frozen(
            &mut fwd,
            &search_batch,
            &state.frozen_selectors,
            genome,
            policy,
        )?;
        let f_t = fwd.graph.constant(f_t_batch.clone());
        let corr = fwd.graph.dw_xcorr(f_s, f_t)?;
        let (cls, ctr, reg) = model.head.forward(&mut fwd, corr)?;
        let maps = ResponseMaps::from_vars(&fwd, cls, ctr, reg)?;
        let (bb, score) = decode(&maps, &win)?;
        cx = bb.cx.clamp(0.0, frame_w);
        cy = bb.cy.clamp(0.0, frame_h);
        boxes.push(bb);
        scores.push(score);

        if policy != MixerPolicy::Disabled {
            for (stage, values) in &state.template_selectors {
                selectors.push(SelectorReport::from_scores(
                    seq_name,
                    k,
                    *stage,
                    "template",
                    values.clone(),
                ));
            }
            for (stage, values) in &state.search_selector_values {
                selectors.push(SelectorReport::from_scores(
                    seq_name,
                    k,
                    *stage,
                    "search",
                    values.clone(),
                ));
            }
        }
    }
    Ok(TrackResult { boxes, scores, selectors })
}

/// Resolve a training pair's language into a per-sample selector source.
pub fn pair_selector_source(
    description: Option<&str>,
    fallback: FallbackMode,
    template_box: BBox,
    vocab: &crate::lang::Vocabulary,
) -> SelectorSource {
    SelectorSource::from_optional_description(
        description.map(|d| vocab.tokenize(d)),
        fallback,
        template_box,
    )
}

/// Prediction file: one line per frame, `frame_idx cx cy w h score`.
pub fn write_predictions(path: &Path, boxes: &[BBox], scores: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, (b, s)) in boxes.iter().zip(scores).enumerate() {
        writeln!(f, "{} {} {} {} {} {}", i, b.cx, b.cy, b.w, b.h, s)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<(BBox, f64)>> {
    let body = std::fs::read_to_string(path)?;
    body.lines()
        .map(|line| {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 6 {
                return Err(Error::Parse(format!("bad prediction line `{line}`")));
            }
            let f = |i: usize| -> Result<f32> {
                parts[i]
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad number `{}`", parts[i])))
            };
            Ok((
                BBox::new(f(1)?, f(2)?, f(3)?, f(4)?),
                parts[5]
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad score `{}`", parts[5])))?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::Vocabulary;

    fn tiny_maps(cls: Vec<f32>, ctr: Vec<f32>, reg: Vec<f32>, r: usize) -> ResponseMaps {
        ResponseMaps {
            cls: Tensor::new(vec![1, r, r], cls).unwrap(),
            ctr: Tensor::new(vec![1, r, r], ctr).unwrap(),
            reg: Tensor::new(vec![4, r, r], reg).unwrap(),
        }
    }

    fn centered_window() -> Window {
        Window { cx: 80.0, cy: 80.0, side: 160.0, out: SEARCH_SIZE }
    }

    #[test]
    fn decode_center_cell_with_symmetric_reg() {
        let r = CORR_SIZE;
        let mut cls = vec![-5.0; r * r];
        cls[6 * r + 6] = 5.0;
        let ctr = vec![0.0; r * r];
        let reg = vec![4.0; 4 * r * r];
        let maps = tiny_maps(cls, ctr, reg, r);
        let (bb, score) = decode(&maps, &centered_window()).unwrap();
        // cell (6,6) is the window center; l=r=t=b=4 cells → 64 px sides
        assert!((bb.cx - 80.0).abs() < 1e-3);
        assert!((bb.cy - 80.0).abs() < 1e-3);
        assert!((bb.w - 64.0).abs() < 1e-3);
        assert!((bb.h - 64.0).abs() < 1e-3);
        let expect = 1.0 / (1.0 + (-5.0f64).exp()) * 0.5;
        assert!((score - expect).abs() < 1e-6);
    }

    #[test]
    fn decode_uniform_p_takes_first_cell() {
        let r = CORR_SIZE;
        let maps = tiny_maps(vec![0.3; r * r], vec![0.1; r * r], vec![1.0; 4 * r * r], r);
        let (bb, _) = decode(&maps, &centered_window()).unwrap();
        // cell (0,0) center is window px (32,32)
        assert!((bb.cx - 32.0).abs() < 1e-3);
        assert!((bb.cy - 32.0).abs() < 1e-3);
    }

    #[test]
    fn decode_score_is_max_p() {
        let r = CORR_SIZE;
        let mut cls = vec![-1.0; r * r];
        cls[5] = 2.0;
        let mut ctr = vec![0.5; r * r];
        ctr[5] = 1.5;
        let maps = tiny_maps(cls, ctr, vec![1.0; 4 * r * r], r);
        let (_, score) = decode(&maps, &centered_window()).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((score - sig(2.0) * sig(1.5)) < 1e-9);
    }

    #[test]
    fn centerness_formula() {
        assert_eq!(centerness(2.0, 2.0, 2.0, 2.0), 1.0);
        let c = centerness(1.0, 1.0, 3.0, 3.0);
        assert!((c - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn head_reg_output_is_strictly_positive() {
        let vocab = Vocabulary::default_world();
        let model = TrackModel::new(vocab.len());
        let mut store: ParamStore<f32> = ParamStore::new();
        model.init_params(&mut store, 3);
        let mut fwd = Forward::new(&store, Mode::Eval);
        let corr = fwd.graph.leaf(
            Tensor::from_fn(&[1, 256, CORR_SIZE, CORR_SIZE], |i| ((i % 31) as f32 - 15.0) * 0.1),
            false,
        );
        let (_, _, reg) = model.head.forward(&mut fwd, corr).unwrap();
        assert!(fwd.graph.value(reg).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn zero_final_layers_give_uniform_cls() {
        // zero-initialized logit layers → all logits equal the bias
        let vocab = Vocabulary::default_world();
        let model = TrackModel::new(vocab.len());
        let mut store: ParamStore<f32> = ParamStore::new();
        model.init_params(&mut store, 4);
        let mut fwd = Forward::new(&store, Mode::Eval);
        let corr = fwd.graph.leaf(
            Tensor::from_fn(&[1, 256, CORR_SIZE, CORR_SIZE], |i| (i as f32 * 0.001).sin()),
            false,
        );
        let (cls, _, _) = model.head.forward(&mut fwd, corr).unwrap();
        let d = fwd.graph.value(cls).data();
        assert!(d.iter().all(|&v| v == d[0]));
        assert_eq!(d[0], -2.0);
    }

    #[test]
    fn loss_zero_iou_term_for_perfect_predictions() {
        // build reg var exactly equal to targets: iou term contributes 0
        let store: ParamStore<f64> = ParamStore::new();
        let mut fwd = Forward::new(&store, Mode::Train);
        let r = CORR_SIZE;
        let gt = BBox::new(80.0, 80.0, 40.0, 40.0);
        // compute targets by hand for the center cell and fill reg with them
        let mut reg_data = vec![1.0; 4 * r * r];
        for row in 0..r {
            for col in 0..r {
                let px = CELL_OFFSET + col as f32 * 8.0;
                let py = CELL_OFFSET + row as f32 * 8.0;
                let cell = row * r + col;
                reg_data[cell] = ((px - gt.x1()) / 8.0) as f64;
                reg_data[r * r + cell] = ((py - gt.y1()) / 8.0) as f64;
                reg_data[2 * r * r + cell] = ((gt.x2() - px) / 8.0) as f64;
                reg_data[3 * r * r + cell] = ((gt.y2() - py) / 8.0) as f64;
            }
        }
        let reg = fwd.graph.leaf(Tensor::new(vec![1, 4, r, r], reg_data).unwrap(), true);
        // cls/ctr logits irrelevant for the reg term; reuse zeros
        let cls = fwd.graph.leaf(Tensor::zeros(&[1, 1, r, r]), true);
        let ctrv = fwd.graph.leaf(Tensor::zeros(&[1, 1, r, r]), true);
        let with_reg = tracking_loss(&mut fwd, cls, ctrv, reg, &[gt], &LossConfig::default())
            .unwrap();
        let base = tracking_loss(
            &mut fwd,
            cls,
            ctrv,
            reg,
            &[gt],
            &LossConfig { reg_weight: 0.0, center_fraction: 0.6 },
        )
        .unwrap();
        let a = fwd.graph.value(with_reg).item().unwrap();
        let b = fwd.graph.value(base).item().unwrap();
        assert!((a - b).abs() < 1e-9, "IoU term must vanish: {a} vs {b}");
    }

    #[test]
    fn loss_is_finite_and_positive_on_random_maps() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut fwd = Forward::new(&store, Mode::Train);
        let r = CORR_SIZE;
        let cls = fwd.graph.leaf(Tensor::from_fn(&[2, 1, r, r], |i| ((i * 13 % 7) as f64 - 3.0) * 0.3), true);
        let ctrv = fwd.graph.leaf(Tensor::from_fn(&[2, 1, r, r], |i| ((i * 7 % 5) as f64 - 2.0) * 0.2), true);
        let pre = fwd.graph.leaf(Tensor::from_fn(&[2, 4, r, r], |i| ((i % 9) as f64 - 4.0) * 0.1), true);
        let reg = fwd.graph.exp(pre);
        let gts = [BBox::new(80.0, 80.0, 32.0, 32.0), BBox::new(60.0, 100.0, 48.0, 24.0)];
        let loss = tracking_loss(&mut fwd, cls, ctrv, reg, &gts, &LossConfig::default()).unwrap();
        let v = fwd.graph.value(loss).item().unwrap();
        assert!(v.is_finite() && v > 0.0);
        fwd.graph.backward(loss).unwrap();
        assert!(fwd.graph.grad(cls).unwrap().all_finite());
    }

    #[test]
    fn prediction_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.txt");
        let boxes = vec![BBox::new(10.5, 20.25, 16.0, 18.0), BBox::new(11.0, 21.0, 16.0, 18.0)];
        let scores = vec![0.75, 0.5];
        write_predictions(&p, &boxes, &scores).unwrap();
        let back = read_predictions(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0.cx, 10.5);
        assert_eq!(back[1].1, 0.5);
        let body = std::fs::read_to_string(&p).unwrap();
        assert!(body.starts_with("0 10.5 20.25 16 18 0.75"));
    }
}
