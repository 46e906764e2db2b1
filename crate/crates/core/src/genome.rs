//! Genome encoding for the searchable architecture.
//!
//! 48 genes, each choosing one of four candidate blocks: 16 template
//! backbone slots (stage block counts 3,3,7,3), 16 search backbone slots,
//! then 8 fusion-cell slots per branch (two per stage: the mixed-path block
//! and the raw-path block).

use rand::Rng;

use crate::error::{Error, Result};

pub const GENOME_LEN: usize = 48;
pub const BACKBONE_SLOTS: usize = 16;
pub const MIXER_SLOTS: usize = 8;
pub const NUM_CHOICES: u8 = 4;

/// Block counts per stage, template and search alike.
pub const STAGE_BLOCKS: [usize; 4] = [3, 3, 7, 3];

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Genome {
    genes: [u8; GENOME_LEN],
}

impl std::fmt::Debug for Genome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Genome({})", self.encode())
    }
}

fn fmt_group(genes: &[u8]) -> String {
    let inner: Vec<String> = genes.iter().map(|g| g.to_string()).collect();
    format!("[{}]", inner.join(","))
}

fn parse_group(s: &str, label: &str, expect: usize) -> Result<Vec<u8>> {
    let body = s
        .strip_prefix('[')
        .and_then(|x| x.strip_suffix(']'))
        .ok_or_else(|| Error::Parse(format!("genome group {label} must be bracketed, got `{s}`")))?;
    let genes: Result<Vec<u8>> = body
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<u8>()
                .map_err(|_| Error::Parse(format!("bad gene `{tok}` in group {label}")))
        })
        .collect();
    let genes = genes?;
    if genes.len() != expect {
        return Err(Error::Parse(format!(
            "group {label} has {} genes, expected {expect}",
            genes.len()
        )));
    }
    Ok(genes)
}

impl Genome {
    pub fn new(genes: Vec<u8>) -> Result<Self> {
        if genes.len() != GENOME_LEN {
            return Err(Error::Genome(format!(
                "genome has {} genes, expected {GENOME_LEN}",
                genes.len()
            )));
        }
        if let Some(&bad) = genes.iter().find(|&&g| g >= NUM_CHOICES) {
            return Err(Error::Genome(format!("gene value {bad} out of range 0..{NUM_CHOICES}")));
        }
        let mut arr = [0u8; GENOME_LEN];
        arr.copy_from_slice(&genes);
        Ok(Self { genes: arr })
    }

    /// Uniform i.i.d. sample over the whole space.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut arr = [0u8; GENOME_LEN];
        for g in &mut arr {
            *g = rng.gen_range(0..NUM_CHOICES);
        }
        Self { genes: arr }
    }

    pub fn genes(&self) -> &[u8; GENOME_LEN] {
        &self.genes
    }

    pub fn gene(&self, i: usize) -> u8 {
        self.genes[i]
    }

    pub fn set_gene(&mut self, i: usize, v: u8) {
        assert!(v < NUM_CHOICES);
        self.genes[i] = v;
    }

    pub fn template_backbone(&self) -> &[u8] {
        &self.genes[0..16]
    }
    pub fn search_backbone(&self) -> &[u8] {
        &self.genes[16..32]
    }
    pub fn template_mixers(&self) -> &[u8] {
        &self.genes[32..40]
    }
    pub fn search_mixers(&self) -> &[u8] {
        &self.genes[40..48]
    }

    /// Backbone gene for (branch, stage 0-based, block index within stage).
    pub fn backbone_gene(&self, search_branch: bool, stage: usize, block: usize) -> u8 {
        let stage_off: usize = STAGE_BLOCKS[..stage].iter().sum();
        let base = if search_branch { 16 } else { 0 };
        self.genes[base + stage_off + block]
    }

    /// Mixer gene for (branch, stage 0-based, slot 0 = mixed path, 1 = raw path).
    pub fn mixer_gene(&self, search_branch: bool, stage: usize, slot: usize) -> u8 {
        let base = if search_branch { 40 } else { 32 };
        self.genes[base + stage * 2 + slot]
    }

    /// `T:[..]|S:[..]|TM:[..]|SM:[..]`
    pub fn encode(&self) -> String {
        format!(
            "T:{}|S:{}|TM:{}|SM:{}",
            fmt_group(self.template_backbone()),
            fmt_group(self.search_backbone()),
            fmt_group(self.template_mixers()),
            fmt_group(self.search_mixers()),
        )
    }

    pub fn decode(s: &str) -> Result<Self> {
        let mut genes: Vec<u8> = Vec::with_capacity(GENOME_LEN);
        let parts: Vec<&str> = s.trim().split('|').collect();
        if parts.len() != 4 {
            return Err(Error::Parse(format!(
                "genome string must have 4 groups separated by `|`, got {}",
                parts.len()
            )));
        }
        for (part, (label, expect)) in parts.iter().zip([
            ("T", BACKBONE_SLOTS),
            ("S", BACKBONE_SLOTS),
            ("TM", MIXER_SLOTS),
            ("SM", MIXER_SLOTS),
        ]) {
            let body = part
                .strip_prefix(&format!("{label}:"))
                .ok_or_else(|| Error::Parse(format!("expected group `{label}:`, got `{part}`")))?;
            genes.extend(parse_group(body, label, expect)?);
        }
        // length is right by construction; gene range still needs checking
        Self::new(genes).map_err(|e| Error::Parse(e.to_string()))
    }

    /// The published architecture (gene order 0..3 = shuffle3, shuffle5,
    /// shuffle7, xception3).
    pub fn paper_preset() -> Self {
        let t = [2, 2, 2, 3, 1, 3, 3, 0, 2, 3, 0, 2, 2, 2, 3, 2];
        let s = [1, 3, 0, 1, 2, 2, 1, 2, 3, 0, 3, 1, 2, 3, 3, 2];
        let tm = [0, 3, 3, 0, 2, 3, 1, 0];
        let sm = [2, 3, 3, 0, 3, 3, 0, 0];
        let mut genes = Vec::with_capacity(GENOME_LEN);
        genes.extend_from_slice(&t);
        genes.extend_from_slice(&s);
        genes.extend_from_slice(&tm);
        genes.extend_from_slice(&sm);
        Self::new(genes).unwrap()
    }

    /// Copy template genes over the search genes (tied symmetric variant).
    pub fn tied_symmetric(&self) -> Self {
        let mut g = self.clone();
        for i in 0..16 {
            g.genes[16 + i] = g.genes[i];
        }
        for i in 0..8 {
            g.genes[40 + i] = g.genes[32 + i];
        }
        g
    }

    pub fn is_symmetric(&self) -> bool {
        self.template_backbone() == self.search_backbone()
            && self.template_mixers() == self.search_mixers()
    }
}
