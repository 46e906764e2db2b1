//! Sentence embeddings from a bag-of-token-embeddings encoder, plus the two
//! fallback strategies for pairs that arrive without a description.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::BBox;
use crate::store::Forward;
use crate::tensor::{Element, Tensor, Var};

/// Embedding width of the language table.
pub const LANG_DIM: usize = 32;

/// Parameter name of the shared embedding table (|V| x d).
pub const EMBED_PARAM: &str = "lang.embed";

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";

/// Token table with reserved specials. Ids are dense line indices.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Parse(format!("duplicate vocabulary token `{t}`")));
            }
        }
        for special in [PAD, CLS, SEP, UNK] {
            if !index.contains_key(special) {
                return Err(Error::Parse(format!("vocabulary missing reserved `{special}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// The built-in vocabulary covering the synthetic world's grammar.
    pub fn default_world() -> Self {
        let words = [
            PAD, CLS, SEP, UNK,
            // function words
            "the", "a",
            // sizes
            "small", "large",
            // colors
            "red", "green", "blue", "yellow", "magenta", "cyan",
            // shapes
            "square", "circle", "triangle", "cross",
            // motion
            "moving", "left", "right", "up", "down",
            // spares for future grammar growth
            "still", "fast", "slow", "near", "far", "behind", "front",
            "first", "second", "object", "shape", "thing", "target",
            "dark", "bright", "tiny", "huge",
        ];
        Self::from_tokens(words.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn cls_id(&self) -> usize {
        self.index[CLS]
    }
    pub fn sep_id(&self) -> usize {
        self.index[SEP]
    }
    pub fn unk_id(&self) -> usize {
        self.index[UNK]
    }
    pub fn pad_id(&self) -> usize {
        self.index[PAD]
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Lowercase, split on non-alphanumeric, map with UNK fallback, and wrap
    /// as [CLS] ... [SEP]. An empty description gives [CLS][SEP].
    pub fn tokenize(&self, description: &str) -> Vec<usize> {
        let mut ids = vec![self.cls_id()];
        for word in description
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            ids.push(self.id_of(word).unwrap_or_else(|| self.unk_id()));
        }
        ids.push(self.sep_id());
        ids
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for t in &self.tokens {
            body.push_str(t);
            body.push('\n');
        }
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        Self::from_tokens(body.lines().map(|l| l.to_string()).collect())
    }

    /// Fresh embedding table for this vocabulary.
    pub fn init_embedding<T: Element>(&self, rng: &mut impl rand::Rng) -> Tensor<T> {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, 1.0).unwrap();
        Tensor::from_fn(&[self.len(), LANG_DIM], |_| T::from_f64(normal.sample(rng)))
    }
}

/// Where a selector vector came from.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum LangSource {
    Description,
    Zero,
    TemplatePool,
}

/// Sentence embedding f_l with its provenance.
#[derive(Clone, Debug)]
pub struct LanguageEmbedding<T> {
    pub vector: Tensor<T>, // (1, d)
    pub source: LangSource,
}

/// Mean of all (N+2) token embeddings, differentiable into the table.
pub fn encode<T: Element>(fwd: &mut Forward<T>, tokens: &[usize]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Encoding("cannot encode an empty token sequence".into()));
    }
    let table = fwd.param(EMBED_PARAM)?;
    fwd.graph.embed_mean(table, tokens)
}

/// Non-graph encode for inspection and tests.
pub fn encode_value<T: Element>(table: &Tensor<T>, tokens: &[usize]) -> Result<LanguageEmbedding<T>> {
    if tokens.is_empty() {
        return Err(Error::Encoding("cannot encode an empty token sequence".into()));
    }
    let (v, d) = table.dims2()?;
    let mut sorted = tokens.to_vec();
    sorted.sort_unstable();
    let mut out = vec![T::zero(); d];
    for &id in &sorted {
        if id >= v {
            return Err(Error::Encoding(format!("token id {id} out of vocabulary {v}")));
        }
        for k in 0..d {
            out[k] += table.data()[id * d + k];
        }
    }
    let inv = T::from_f64(1.0 / tokens.len() as f64);
    for x in &mut out {
        *x *= inv;
    }
    Ok(LanguageEmbedding {
        vector: Tensor::new(vec![1, d], out)?,
        source: LangSource::Description,
    })
}

/// Strategy for pairs without a description.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackMode {
    Zero,
    TemplatePool,
}

/// Project a frame-pixel box onto a feature grid of the given cumulative
/// stride, rounding outward. Returns None when the projection misses the
/// grid entirely.
pub fn project_box_to_grid(
    b: &BBox,
    stride: usize,
    grid_h: usize,
    grid_w: usize,
) -> Option<(usize, usize, usize, usize)> {
    let s = stride as f32;
    let y0 = (b.y1() / s).floor().max(0.0) as usize;
    let x0 = (b.x1() / s).floor().max(0.0) as usize;
    let y1 = (b.y2() / s).ceil().min(grid_h as f32) as usize;
    let x1 = (b.x2() / s).ceil().min(grid_w as f32) as usize;
    if y0 >= y1 || x0 >= x1 || y0 >= grid_h || x0 >= grid_w {
        return None;
    }
    Some((y0, y1, x0, x1))
}

/// Selector for a missing description, as a plain vector.
///
/// Zero mode bypasses the projection entirely; template-pool mode averages
/// the same-stage template feature over the target box projected onto the
/// feature grid (outward rounding). An empty projection falls back to global
/// average pooling with a logged warning.
pub fn fallback_selector<T: Element>(
    mode: FallbackMode,
    stage_channels: usize,
    template_feature: &Tensor<T>, // (1, C, H, W)
    target_box: &BBox,
    stride: usize,
) -> Result<Tensor<T>> {
    match mode {
        FallbackMode::Zero => Ok(Tensor::zeros(&[1, stage_channels])),
        FallbackMode::TemplatePool => {
            let (n, c, h, w) = template_feature.dims4()?;
            if n != 1 || c != stage_channels {
                return Err(Error::Dimension(format!(
                    "template feature ({n},{c},..) vs expected (1,{stage_channels},..)"
                )));
            }
            let region = project_box_to_grid(target_box, stride, h, w);
            let (y0, y1, x0, x1) = match region {
                Some(r) => r,
                None => {
                    log::warn!(
                        "template-pool box projected to an empty region; using global average"
                    );
                    (0, h, 0, w)
                }
            };
            let area = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
            let mut out = vec![T::zero(); c];
            for ci in 0..c {
                let base = ci * h * w;
                let mut acc = T::zero();
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        acc += template_feature.data()[base + yy * w + xx];
                    }
                }
                out[ci] = acc / area;
            }
            Tensor::new(vec![1, c], out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::ParamStore;
    use crate::tensor::Mode;

    fn vocab() -> Vocabulary {
        Vocabulary::default_world()
    }

    #[test]
    fn tokenize_wraps_with_specials() {
        let v = vocab();
        let ids = v.tokenize("red square");
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[0], v.cls_id());
        assert_eq!(ids[1], v.id_of("red").unwrap());
        assert_eq!(ids[2], v.id_of("square").unwrap());
        assert_eq!(ids[3], v.sep_id());
    }

    #[test]
    fn tokenize_empty_is_cls_sep() {
        let v = vocab();
        assert_eq!(v.tokenize(""), vec![v.cls_id(), v.sep_id()]);
    }

    #[test]
    fn tokenize_unknown_word_maps_to_unk() {
        let v = vocab();
        let ids = v.tokenize("Crimson square!");
        assert_eq!(ids, vec![v.cls_id(), v.unk_id(), v.id_of("square").unwrap(), v.sep_id()]);
    }

    #[test]
    fn encode_mean_of_identical_rows_is_the_row() {
        let table: Tensor<f64> =
            Tensor::from_fn(&[5, LANG_DIM], |i| if i % LANG_DIM == 0 { 0.7 } else { -0.1 });
        let e = encode_value(&table, &[0, 2, 4]).unwrap();
        assert!((e.vector.data()[0] - 0.7).abs() < 1e-12);
        assert!((e.vector.data()[1] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn encode_two_tokens_with_zero_specials_averages_over_four() {
        // rows: cls=0, sep=0, e1, e2 → f_l = (e1+e2)/4
        let mut data = vec![0.0f64; 4 * LANG_DIM];
        for k in 0..LANG_DIM {
            data[2 * LANG_DIM + k] = 1.0; // e1
            data[3 * LANG_DIM + k] = 3.0; // e2
        }
        let table = Tensor::new(vec![4, LANG_DIM], data).unwrap();
        let e = encode_value(&table, &[0, 2, 3, 1]).unwrap();
        assert!(e.vector.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn encode_is_permutation_invariant() {
        let v = vocab();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let table: Tensor<f64> = v.init_embedding(&mut rng);
        let a = encode_value(&table, &[1, 4, 9, 2]).unwrap();
        let b = encode_value(&table, &[9, 1, 2, 4]).unwrap();
        assert_eq!(a.vector.data(), b.vector.data());
    }

    #[test]
    fn encode_rejects_empty_sequence() {
        let table: Tensor<f64> = Tensor::zeros(&[4, LANG_DIM]);
        assert!(matches!(encode_value(&table, &[]), Err(Error::Encoding(_))));
    }

    #[test]
    fn encode_gradient_splits_over_rows() {
        // loss = ||f_l||^2 → d/d row = 2*f_l/(N+2) for each contributing row
        let v = vocab();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert(EMBED_PARAM, v.init_embedding::<f64>(&mut rng), true);
        let mut fwd = Forward::new(&store, Mode::Train);
        let tokens = v.tokenize("red square");
        let fl = encode(&mut fwd, &tokens).unwrap();
        let sq = fwd.graph.mul(fl, fl).unwrap();
        let loss = fwd.graph.sum_all(sq);
        fwd.graph.backward(loss).unwrap();
        let grads = fwd.collect_grads();
        let g = &grads[EMBED_PARAM];
        let flv = fwd.graph.value(fl).data();
        let n_tok = tokens.len() as f64;
        for &tok in &tokens {
            for k in 0..LANG_DIM {
                let expect = 2.0 * flv[k] / n_tok;
                let got = g.data()[tok * LANG_DIM + k];
                assert!((got - expect).abs() < 1e-12, "row {tok} k {k}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn fallback_zero_is_exactly_zero() {
        let t: Tensor<f32> = Tensor::ones(&[1, 64, 8, 8]);
        let b = BBox::new(32.0, 32.0, 16.0, 16.0);
        let s = fallback_selector(FallbackMode::Zero, 64, &t, &b, 8).unwrap();
        assert_eq!(s.shape(), &[1, 64]);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fallback_pool_over_constant_feature() {
        let t: Tensor<f64> = Tensor::full(&[1, 8, 8, 8], 0.7);
        let b = BBox::new(32.0, 32.0, 20.0, 20.0);
        let s = fallback_selector(FallbackMode::TemplatePool, 8, &t, &b, 8).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn fallback_pool_averages_covered_cells() {
        // feature 1x1x2x2 per channel rows [1,3;5,7], box covering the top row → 2.0
        let mut t: Tensor<f64> = Tensor::zeros(&[1, 2, 2, 2]);
        for c in 0..2 {
            t.data_mut()[c * 4..(c + 1) * 4].copy_from_slice(&[1.0, 3.0, 5.0, 7.0]);
        }
        // stride 8, grid 2x2; box y in [0,8) x spanning both columns
        let b = BBox::new(8.0, 4.0, 16.0, 8.0);
        let s = fallback_selector(FallbackMode::TemplatePool, 2, &t, &b, 8).unwrap();
        assert_eq!(s.data(), &[2.0, 2.0]);
    }

    #[test]
    fn fallback_pool_empty_projection_uses_global_average() {
        let mut t: Tensor<f64> = Tensor::zeros(&[1, 1, 2, 2]);
        t.data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 6.0]);
        // box entirely off-grid
        let b = BBox::new(-40.0, -40.0, 4.0, 4.0);
        let s = fallback_selector(FallbackMode::TemplatePool, 1, &t, &b, 8).unwrap();
        assert_eq!(s.data(), &[3.0]);
    }

    #[test]
    fn vocabulary_file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("vocab.txt");
        let p2 = dir.path().join("vocab2.txt");
        let v = vocab();
        v.save(&p1).unwrap();
        let v2 = Vocabulary::load(&p1).unwrap();
        v2.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(v.len(), v2.len());
        assert_eq!(v2.id_of("red"), v.id_of("red"));
    }
}
