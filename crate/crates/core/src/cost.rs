//! Closed-form serving costs: key/value cache bytes and matmul MACs for
//! prefill and single-token decode.
//!
//! Attention MACs are `2 * q_width` per attended (query, key) pair: one
//! score dot product and one value accumulation per query head.

use std::fmt::Write as _;

use crate::config::{Family, LoopPosition, ModelConfig};
use crate::error::{Error, Result};

pub const MIB: u64 = 1 << 20;

/// Architecture quantities that enter the cost formulas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchDescriptor {
    pub family: Family,
    pub loop_position: LoopPosition,
    pub n_layers: u64,
    pub d_model: u64,
    /// Query width `n_heads * head_dim`.
    pub q_width: u64,
    /// Key/value width `n_kv_heads * head_dim`.
    pub kv_width: u64,
    pub ffn_hidden: u64,
    pub vocab: u64,
    pub window: u64,
    pub loops: u64,
    /// Looped segment of `rins`.
    pub rins_recursive_layers: u64,
    pub bytes_per_elem: u64,
}

impl ArchDescriptor {
    pub fn from_config(cfg: &ModelConfig, bytes_per_elem: u64) -> Result<Self> {
        cfg.validate()?;
        if bytes_per_elem == 0 {
            return Err(Error::InvalidArgument("bytes per element must be positive".into()));
        }
        Ok(Self {
            family: cfg.family,
            loop_position: cfg.loop_position,
            n_layers: cfg.n_layers as u64,
            d_model: cfg.d_model as u64,
            q_width: cfg.layout().q_width() as u64,
            kv_width: cfg.kv_width() as u64,
            ffn_hidden: cfg.ffn_hidden as u64,
            vocab: cfg.vocab as u64,
            window: cfg.window as u64,
            loops: cfg.loops as u64,
            rins_recursive_layers: cfg.rins_segment() as u64,
            bytes_per_elem,
        })
    }

    fn half(&self) -> u64 {
        self.n_layers / 2
    }

    /// Layer passes with full-length self-attention caches, and with
    /// window-bounded ones.
    fn self_passes(&self) -> (u64, u64) {
        let (l, t, half) = (self.n_layers, self.loops, self.half());
        match (self.family, self.loop_position) {
            (Family::Transformer, _) => (l, 0),
            (Family::UniversalTransformer, _) => (l * t, 0),
            (Family::Rins, _) => (l - self.rins_recursive_layers + self.rins_recursive_layers * t, 0),
            (Family::Yoco, _) | (Family::Uyoco, LoopPosition::SelfDecoder) => (0, half * t),
            (Family::Uyoco, LoopPosition::CrossDecoderSharedKv) => (0, half),
            (Family::Uyoco, LoopPosition::CrossDecoderSelfAttn) => (half * t, half),
        }
    }

    /// Cross-attention layer passes against the global cache.
    fn cross_passes(&self) -> u64 {
        match (self.family, self.loop_position) {
            (Family::Yoco, _) | (Family::Uyoco, LoopPosition::SelfDecoder) => self.half(),
            (Family::Uyoco, LoopPosition::CrossDecoderSharedKv) => self.half() * self.loops,
            _ => 0,
        }
    }

    fn has_global_kv(&self) -> bool {
        self.cross_passes() > 0
    }

    fn self_linear_per_row(&self) -> u64 {
        let (d, q, k) = (self.d_model, self.q_width, self.kv_width);
        d * q + 2 * d * k + q * d + 3 * d * self.ffn_hidden
    }

    fn cross_linear_per_row(&self) -> u64 {
        2 * self.d_model * self.q_width + 3 * self.d_model * self.ffn_hidden
    }
}

/// Cache bytes split into context-length buffers and window buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvBytes {
    pub global: u64,
    pub local: u64,
}

impl KvBytes {
    pub fn total(&self) -> u64 {
        self.global + self.local
    }
}

pub fn kv_cache_split(a: &ArchDescriptor, n: u64) -> KvBytes {
    let row = 2 * a.kv_width * a.bytes_per_elem;
    let (full, windowed) = a.self_passes();
    let shared = if a.has_global_kv() { 1 } else { 0 };
    KvBytes {
        global: (full + shared) * n * row,
        local: windowed * a.window.min(n) * row,
    }
}

/// Total key/value cache bytes at context length `n`.
pub fn kv_cache_bytes(a: &ArchDescriptor, n: u64) -> u64 {
    kv_cache_split(a, n).total()
}

/// Matmul MACs split by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MacBreakdown {
    /// Attention mixing inside self-attention passes.
    pub self_attn: u64,
    /// Attention mixing against the global cache.
    pub global_attn: u64,
    /// Projections, feed-forward networks and the output head.
    pub linear: u64,
}

impl MacBreakdown {
    pub fn attention(&self) -> u64 {
        self.self_attn + self.global_attn
    }

    pub fn total(&self) -> u64 {
        self.self_attn + self.global_attn + self.linear
    }
}

/// `Σ_{i=1..n} min(w, i)`: attended pairs of one windowed pass over `n` rows.
fn window_pairs(n: u64, w: u64) -> u64 {
    if n <= w {
        n * (n + 1) / 2
    } else {
        w * (w + 1) / 2 + (n - w) * w
    }
}

/// MACs to absorb an `n`-token prompt, with cross-attention layers and the
/// head evaluated at the last position only.
pub fn prefill_macs(a: &ArchDescriptor, n: u64) -> MacBreakdown {
    let pair = 2 * a.q_width;
    let (full, windowed) = a.self_passes();
    let cross = a.cross_passes();
    let mut m = MacBreakdown {
        self_attn: (full * n * (n + 1) / 2 + windowed * window_pairs(n, a.window)) * pair,
        global_attn: cross * n * pair,
        linear: (full + windowed) * n * a.self_linear_per_row() + a.d_model * a.vocab,
    };
    if a.has_global_kv() {
        m.linear += n * 2 * a.d_model * a.kv_width + cross * a.cross_linear_per_row();
    }
    m
}

/// MACs for one new token at context length `n` (the token included).
pub fn decode_step_macs(a: &ArchDescriptor, n: u64) -> MacBreakdown {
    let pair = 2 * a.q_width;
    let (full, windowed) = a.self_passes();
    let cross = a.cross_passes();
    let mut m = MacBreakdown {
        self_attn: (full * n + windowed * a.window.min(n)) * pair,
        global_attn: cross * n * pair,
        linear: (full + windowed) * a.self_linear_per_row() + a.d_model * a.vocab,
    };
    if a.has_global_kv() {
        m.linear += 2 * a.d_model * a.kv_width + cross * a.cross_linear_per_row();
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub label: String,
    pub n: u64,
    pub kv: KvBytes,
    pub prefill: MacBreakdown,
    pub decode: MacBreakdown,
}

impl CostReport {
    pub fn new(label: impl Into<String>, a: &ArchDescriptor, n: u64) -> Self {
        Self {
            label: label.into(),
            n,
            kv: kv_cache_split(a, n),
            prefill: prefill_macs(a, n),
            decode: decode_step_macs(a, n),
        }
    }

    pub fn kv_mib(&self) -> f64 {
        self.kv.total() as f64 / MIB as f64
    }
}

pub const REPORT_CSV_HEADER: &str = "family,N,kv_bytes,kv_mb,prefill_macs,decode_macs,\
prefill_self_attn,prefill_global_attn,prefill_linear,decode_self_attn,decode_global_attn,decode_linear";

pub fn reports_to_csv(reports: &[CostReport]) -> String {
    let mut s = String::from(REPORT_CSV_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{},{},{},{},{},{},{},{}",
            r.label,
            r.n,
            r.kv.total(),
            r.kv_mib(),
            r.prefill.total(),
            r.decode.total(),
            r.prefill.self_attn,
            r.prefill.global_attn,
            r.prefill.linear,
            r.decode.self_attn,
            r.decode.global_attn,
            r.decode.linear
        );
    }
    s
}

// ---------------------------------------------------------------------------
// reference table

/// Context lengths of the reference occupancy table.
pub const PAPER_CONTEXTS: [u64; 6] = [8 << 10, 16 << 10, 32 << 10, 64 << 10, 128 << 10, 256 << 10];

/// Published cache occupancy in MiB, one row per architecture.
pub const PAPER_KV_MIB: [(&str, [u64; 6]); 4] = [
    ("Transformer", [320, 640, 1280, 2560, 5120, 10240]),
    ("RINS", [640, 1280, 2560, 5120, 10240, 20480]),
    ("YOCO", [26, 42, 74, 138, 266, 522]),
    ("UYOCO", [46, 62, 94, 158, 286, 542]),
];

/// The 20-layer reference models: 4 KV heads of width 128 at 2 bytes,
/// window 512, three loops.
pub fn paper_descriptor(row: &str) -> Result<ArchDescriptor> {
    let (family, loops) = match row {
        "Transformer" => (Family::Transformer, 1),
        "RINS" => (Family::Rins, 3),
        "YOCO" => (Family::Yoco, 1),
        "UYOCO" => (Family::Uyoco, 3),
        other => return Err(Error::InvalidArgument(format!("no reference row `{other}`"))),
    };
    Ok(ArchDescriptor {
        family,
        loop_position: LoopPosition::SelfDecoder,
        n_layers: 20,
        d_model: 2048,
        q_width: 2048,
        kv_width: 512,
        ffn_hidden: 0,
        vocab: 0,
        window: 512,
        loops,
        rins_recursive_layers: 10,
        bytes_per_elem: 2,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableCell {
    pub row: &'static str,
    pub n: u64,
    pub expected_mib: u64,
    pub computed_bytes: u64,
}

impl TableCell {
    pub fn computed_mib(&self) -> f64 {
        self.computed_bytes as f64 / MIB as f64
    }

    pub fn matches(&self) -> bool {
        self.computed_bytes == self.expected_mib * MIB
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableDiff {
    pub cells: Vec<TableCell>,
}

impl TableDiff {
    pub fn all_match(&self) -> bool {
        self.cells.iter().all(TableCell::matches)
    }

    pub fn mismatches(&self) -> usize {
        self.cells.iter().filter(|c| !c.matches()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("family,N,expected_mb,computed_mb,match\n");
        for c in &self.cells {
            let _ = writeln!(s, "{},{},{},{},{}", c.row, c.n, c.expected_mib, c.computed_mib(), c.matches());
        }
        s
    }
}

/// Evaluates [`kv_cache_bytes`] at every cell of the reference table.
pub fn reproduce_paper_kv_table() -> TableDiff {
    let mut cells = Vec::new();
    for (row, expected) in PAPER_KV_MIB {
        let a = paper_descriptor(row).expect("reference rows are known");
        for (&n, &mib) in PAPER_CONTEXTS.iter().zip(&expected) {
            cells.push(TableCell {
                row,
                n,
                expected_mib: mib,
                computed_bytes: kv_cache_bytes(&a, n),
            });
        }
    }
    TableDiff { cells }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk(family: Family) -> ArchDescriptor {
        ArchDescriptor::from_config(&ModelConfig::desk(family), 2).unwrap()
    }

    #[test]
    fn reference_cells() {
        let t = reproduce_paper_kv_table();
        assert_eq!(t.cells.len(), 24);
        assert!(t.all_match(), "{}", t.to_csv());
        let yoco = paper_descriptor("YOCO").unwrap();
        let split = kv_cache_split(&yoco, 8192);
        assert_eq!((split.global / MIB, split.local / MIB), (16, 10));
    }

    #[test]
    fn global_term_ignores_loops() {
        let base = desk(Family::Uyoco);
        for t in [1, 2, 3, 5] {
            let a = ArchDescriptor { loops: t, ..base.clone() };
            assert_eq!(kv_cache_split(&a, 100).global, 2 * 100 * 32 * 2);
            assert_eq!(kv_cache_split(&a, 100).local, t * 2 * 2 * 8 * 32 * 2);
        }
    }

    #[test]
    fn window_pairs_matches_sum() {
        for n in 1..40 {
            let brute: u64 = (1..=n).map(|i| i.min(8)).sum();
            assert_eq!(window_pairs(n, 8), brute);
        }
    }

    #[test]
    fn decode_attention_terms() {
        let t = desk(Family::Transformer);
        assert_eq!(decode_step_macs(&t, 100).attention(), 4 * 100 * 64 * 2);
        let u = desk(Family::Uyoco);
        assert_eq!(decode_step_macs(&u, 100).attention(), 2 * (100 + 3 * 8) * 64 * 2);
    }

    #[test]
    fn self_component_is_linear_in_loops() {
        let a1 = ArchDescriptor { loops: 1, ..desk(Family::Uyoco) };
        let a3 = ArchDescriptor { loops: 3, ..desk(Family::Uyoco) };
        assert_eq!(prefill_macs(&a3, 77).self_attn, 3 * prefill_macs(&a1, 77).self_attn);
    }

    #[test]
    fn csv_has_one_row_per_report() {
        let a = desk(Family::Uyoco);
        let reports: Vec<_> = [8, 16].iter().map(|&n| CostReport::new("uyoco", &a, n)).collect();
        let csv = reports_to_csv(&reports);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("uyoco,8,"));
    }
}
