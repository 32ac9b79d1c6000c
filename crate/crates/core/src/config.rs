//! Architecture descriptor, its flat `key = value` text form, and the
//! execution plan every forward path follows.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{HeadLayout, RopeConfig, DEFAULT_NORM_EPS, DEFAULT_ROPE_BASE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Transformer,
    Yoco,
    Uyoco,
    UniversalTransformer,
    Rins,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Transformer,
        Family::Yoco,
        Family::Uyoco,
        Family::UniversalTransformer,
        Family::Rins,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Transformer => "transformer",
            Family::Yoco => "yoco",
            Family::Uyoco => "uyoco",
            Family::UniversalTransformer => "universal_transformer",
            Family::Rins => "rins",
        }
    }

    /// Decoder-decoder layout with a shared global KV cache.
    pub fn is_yoco_like(self) -> bool {
        matches!(self, Family::Yoco | Family::Uyoco)
    }

    pub fn is_recursive(self) -> bool {
        matches!(self, Family::Uyoco | Family::UniversalTransformer | Family::Rins)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s || (s == "ut" && *f == Family::UniversalTransformer))
            .ok_or_else(|| Error::config("family", format!("unknown family `{s}`")))
    }
}

/// Where the loop sits in a `uyoco` model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LoopPosition {
    /// Loop the sliding-window self-decoder.
    #[default]
    SelfDecoder,
    /// Loop the cross-decoder against fixed shared keys/values.
    CrossDecoderSharedKv,
    /// Loop an upper block of ordinary causal self-attention layers; no
    /// shared cache exists.
    CrossDecoderSelfAttn,
}

impl LoopPosition {
    pub const ALL: [LoopPosition; 3] = [
        LoopPosition::SelfDecoder,
        LoopPosition::CrossDecoderSharedKv,
        LoopPosition::CrossDecoderSelfAttn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LoopPosition::SelfDecoder => "self_decoder",
            LoopPosition::CrossDecoderSharedKv => "cross_decoder_shared_kv",
            LoopPosition::CrossDecoderSelfAttn => "cross_decoder_self_attn",
        }
    }
}

impl fmt::Display for LoopPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LoopPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LoopPosition::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config("loop_position", format!("unknown loop position `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub family: Family,
    /// Total layer count `L`; decoder-decoder families split it in halves.
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub ffn_hidden: usize,
    /// Sliding window `W`, current token included.
    pub window: usize,
    /// Loop count `T`.
    pub loops: usize,
    pub vocab: usize,
    pub loop_position: LoopPosition,
    /// Looped tail segment `R` for `rins`; `None` means `L / 2`.
    pub rins_recursive_layers: Option<usize>,
    pub seed: u64,
    pub norm_eps: f32,
    pub rope_base: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(Family::Uyoco)
    }
}

impl ModelConfig {
    /// Desk-scale defaults: d=64, L=4, 4 heads over 2 KV heads, W=8, V=256,
    /// and T=3 for recursive families.
    pub fn desk(family: Family) -> Self {
        Self {
            family,
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            n_kv_heads: 2,
            ffn_hidden: 192,
            window: 8,
            loops: if family.is_recursive() { 3 } else { 1 },
            vocab: 256,
            loop_position: LoopPosition::SelfDecoder,
            rins_recursive_layers: None,
            seed: 0,
            norm_eps: DEFAULT_NORM_EPS,
            rope_base: DEFAULT_ROPE_BASE,
        }
    }

    pub fn with_family(mut self, family: Family) -> Self {
        self.family = family;
        self
    }

    pub fn with_loops(mut self, loops: usize) -> Self {
        self.loops = loops;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout {
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim(),
        }
    }

    pub fn rope(&self) -> RopeConfig {
        RopeConfig {
            head_dim: self.head_dim(),
            base: self.rope_base,
        }
    }

    pub fn rins_segment(&self) -> usize {
        self.rins_recursive_layers.unwrap_or(self.n_layers / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 || self.n_layers % 2 != 0 {
            return Err(Error::config("n_layers", format!("must be even and >= 2, got {}", self.n_layers)));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "d_model",
                format!("{} is not a multiple of n_heads = {}", self.d_model, self.n_heads),
            ));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config("n_heads", format!("head_dim {} must be even for RoPE", self.head_dim())));
        }
        if self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::config(
                "n_kv_heads",
                format!("{} does not divide n_heads = {}", self.n_kv_heads, self.n_heads),
            ));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::config("ffn_hidden", "must be positive"));
        }
        if self.window == 0 {
            return Err(Error::config("window", "must be at least 1"));
        }
        if self.vocab < 2 {
            return Err(Error::config("vocab", "must be at least 2"));
        }
        if self.loops == 0 {
            return Err(Error::config("loops", "must be at least 1"));
        }
        if matches!(self.family, Family::Transformer | Family::Yoco) && self.loops != 1 {
            return Err(Error::config(
                "loops",
                format!("family {} is not recursive; loops must be 1, got {}", self.family, self.loops),
            ));
        }
        if self.loop_position != LoopPosition::SelfDecoder && self.family != Family::Uyoco {
            return Err(Error::config(
                "loop_position",
                format!("{} only applies to family uyoco", self.loop_position),
            ));
        }
        if self.family == Family::Rins {
            let r = self.rins_segment();
            if r == 0 || r > self.n_layers {
                return Err(Error::config(
                    "rins_recursive_layers",
                    format!("must lie in 1..={}, got {r}", self.n_layers),
                ));
            }
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("norm_eps", "must be positive"));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::config("rope_base", "must exceed 1"));
        }
        Ok(())
    }

    /// Stages executed by a forward pass, in order.
    pub fn plan(&self) -> Vec<Stage> {
        let l = self.n_layers;
        let half = l / 2;
        let t = self.loops;
        let lower = |loops| Stage::SelfAttn {
            block: Block::SelfDecoder,
            layers: 0..half,
            window: Some(self.window),
            rope: true,
            loops,
        };
        let uniform = |layers: Range<usize>, loops| Stage::SelfAttn {
            block: Block::Decoder,
            layers,
            window: None,
            rope: true,
            loops,
        };
        match (self.family, self.loop_position) {
            (Family::Transformer, _) => vec![uniform(0..l, 1)],
            (Family::UniversalTransformer, _) => vec![uniform(0..l, t)],
            (Family::Rins, _) => {
                let r = self.rins_segment();
                let mut plan = Vec::new();
                if r < l {
                    plan.push(uniform(0..l - r, 1));
                }
                plan.push(uniform(l - r..l, t));
                plan
            }
            (Family::Yoco, _) | (Family::Uyoco, LoopPosition::SelfDecoder) => vec![
                lower(t),
                Stage::GlobalKv,
                Stage::Cross {
                    layers: 0..half,
                    loops: 1,
                },
            ],
            (Family::Uyoco, LoopPosition::CrossDecoderSharedKv) => vec![
                lower(1),
                Stage::GlobalKv,
                Stage::Cross {
                    layers: 0..half,
                    loops: t,
                },
            ],
            (Family::Uyoco, LoopPosition::CrossDecoderSelfAttn) => vec![
                lower(1),
                Stage::SelfAttn {
                    block: Block::CrossDecoder,
                    layers: half..l,
                    window: None,
                    rope: false,
                    loops: t,
                },
            ],
        }
    }

    /// Number of self-attention layers with their own K/V projections.
    pub fn n_self_layers(&self) -> usize {
        match (self.family, self.loop_position) {
            (Family::Yoco, _) | (Family::Uyoco, LoopPosition::SelfDecoder | LoopPosition::CrossDecoderSharedKv) => {
                self.n_layers / 2
            }
            _ => self.n_layers,
        }
    }

    /// Number of query-only cross-attention layers.
    pub fn n_cross_layers(&self) -> usize {
        self.n_layers - self.n_self_layers()
    }

    pub fn has_global_kv(&self) -> bool {
        self.n_cross_layers() > 0
    }

    /// Layer applications in one forward pass, loops included.
    pub fn total_layer_passes(&self) -> usize {
        self.plan().iter().map(Stage::layer_passes).sum()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(field: &'static str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::config(field, format!("cannot parse `{v}`")))
        }
        match key {
            "family" => self.family = value.parse()?,
            "n_layers" | "layers" => self.n_layers = num("n_layers", value)?,
            "d_model" => self.d_model = num("d_model", value)?,
            "n_heads" | "heads" => self.n_heads = num("n_heads", value)?,
            "n_kv_heads" | "kv_heads" => self.n_kv_heads = num("n_kv_heads", value)?,
            "ffn_hidden" => self.ffn_hidden = num("ffn_hidden", value)?,
            "window" => self.window = num("window", value)?,
            "loops" => self.loops = num("loops", value)?,
            "vocab" => self.vocab = num("vocab", value)?,
            "loop_position" => self.loop_position = value.parse()?,
            "rins_recursive_layers" => {
                self.rins_recursive_layers = match value {
                    "" | "auto" => None,
                    v => Some(num("rins_recursive_layers", v)?),
                }
            }
            "seed" => self.seed = num("seed", value)?,
            "norm_eps" => self.norm_eps = num("norm_eps", value)?,
            "rope_base" => self.rope_base = num("rope_base", value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown model config key `{key}`"))),
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 14] = [
        "family",
        "n_layers",
        "d_model",
        "n_heads",
        "n_kv_heads",
        "ffn_hidden",
        "window",
        "loops",
        "vocab",
        "loop_position",
        "rins_recursive_layers",
        "seed",
        "norm_eps",
        "rope_base",
    ];

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("family", self.family.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_kv_heads", self.n_kv_heads.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("window", self.window.to_string()),
            ("loops", self.loops.to_string()),
            ("vocab", self.vocab.to_string()),
            ("loop_position", self.loop_position.to_string()),
            (
                "rins_recursive_layers",
                self.rins_recursive_layers.map_or_else(|| "auto".to_string(), |r| r.to_string()),
            ),
            ("seed", self.seed.to_string()),
            ("norm_eps", format!("{:e}", self.norm_eps)),
            ("rope_base", self.rope_base.to_string()),
        ]
    }

    pub fn to_kv_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses the output of [`ModelConfig::to_kv_text`]; missing keys keep
    /// desk defaults.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in parse_kv_text(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`, got `{raw}`", no + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse(format!("line {}: empty key", no + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Which half of the network a layer pass belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    SelfDecoder,
    CrossDecoder,
    /// Layers of a single-stack decoder (transformer families).
    Decoder,
}

impl Block {
    pub fn name(self) -> &'static str {
        match self {
            Block::SelfDecoder => "self",
            Block::CrossDecoder => "cross",
            Block::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stage {
    /// Self-attention layers `layers` of the self-layer list, the whole
    /// range repeated `loops` times.
    SelfAttn {
        block: Block,
        layers: Range<usize>,
        window: Option<usize>,
        rope: bool,
        loops: usize,
    },
    /// Projection of the current hidden state into the shared keys/values.
    GlobalKv,
    /// Cross-attention layers `layers` of the cross-layer list, repeated
    /// `loops` times against the shared keys/values.
    Cross { layers: Range<usize>, loops: usize },
}

impl Stage {
    pub fn layer_passes(&self) -> usize {
        match self {
            Stage::SelfAttn { layers, loops, .. } | Stage::Cross { layers, loops } => layers.len() * loops,
            Stage::GlobalKv => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_validate() {
        for f in Family::ALL {
            ModelConfig::desk(f).validate().unwrap();
        }
        let d = ModelConfig::default();
        assert_eq!((d.d_model, d.n_layers, d.n_heads, d.n_kv_heads, d.window, d.loops, d.vocab), (64, 4, 4, 2, 8, 3, 256));
        assert_eq!(d.kv_width(), 32);
    }

    #[test]
    fn invariants_name_the_field() {
        let mut c = ModelConfig::desk(Family::Uyoco);
        c.n_layers = 3;
        assert!(matches!(c.validate(), Err(Error::Config { field: "n_layers", .. })));

        let c = ModelConfig::desk(Family::Yoco).with_loops(3);
        assert!(matches!(c.validate(), Err(Error::Config { field: "loops", .. })));

        let c = ModelConfig::desk(Family::Transformer).with_loops(2);
        assert!(c.validate().is_err());

        let mut c = ModelConfig::desk(Family::Uyoco);
        c.n_kv_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config { field: "n_kv_heads", .. })));

        let mut c = ModelConfig::desk(Family::Rins);
        c.loop_position = LoopPosition::CrossDecoderSharedKv;
        assert!(matches!(c.validate(), Err(Error::Config { field: "loop_position", .. })));
    }

    #[test]
    fn plans_per_family() {
        let c = ModelConfig::desk(Family::Uyoco);
        assert_eq!(c.total_layer_passes(), 2 * 3 + 2);
        let c = ModelConfig::desk(Family::UniversalTransformer);
        assert_eq!(c.total_layer_passes(), 4 * 3);
        let c = ModelConfig::desk(Family::Rins);
        assert_eq!(c.total_layer_passes(), 2 + 2 * 3);
        let mut c = ModelConfig::desk(Family::Uyoco);
        c.loop_position = LoopPosition::CrossDecoderSelfAttn;
        assert_eq!(c.n_self_layers(), 4);
        assert!(!c.has_global_kv());
        assert_eq!(c.total_layer_passes(), 2 + 2 * 3);
    }

    #[test]
    fn kv_text_round_trip() {
        let mut c = ModelConfig::desk(Family::Rins);
        c.rins_recursive_layers = Some(1);
        c.seed = 42;
        let back = ModelConfig::from_kv_text(&c.to_kv_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn kv_text_comments_and_errors() {
        let pairs = parse_kv_text("# header\nfamily = yoco  # trailing\n\nloops=1\n").unwrap();
        assert_eq!(pairs, vec![("family".into(), "yoco".into()), ("loops".into(), "1".into())]);
        assert!(parse_kv_text("no equals sign").is_err());
        assert!(ModelConfig::from_kv_text("bogus = 1").is_err());
    }
}
