//! Layer-wise angular-distance profile of hidden states.

use std::fmt::Write as _;

use crate::autodiff::Tape;
use crate::config::{Block, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{forward_hidden, ModelParams};
use crate::tensor::Tensor;

/// Position of one layer application within a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PassLabel {
    pub block: Block,
    pub layer: usize,
    pub iteration: usize,
}

/// Hidden states `[.., n, d]` recorded after every layer pass, in execution
/// order.
#[derive(Debug, Clone, Default)]
pub struct LayerTrace {
    entries: Vec<(PassLabel, Tensor)>,
}

impl LayerTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, label: PassLabel, state: Tensor) {
        debug_assert!(self.entries.last().is_none_or(|(_, s)| s.shape() == state.shape()));
        self.entries.push((label, state));
    }

    pub fn entries(&self) -> &[(PassLabel, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `arccos(cos(a, b)) / π`, in `[0, 1]`.
///
/// Evaluated as `2·atan2(|â − b̂|, |â + b̂|) / π` on the unit vectors, which
/// is exact at both ends: identical inputs give 0 and opposite inputs 1.
pub fn angular_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("angular_distance", &[a.len()], &[b.len()]));
    }
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("angular distance of a zero vector".into()));
    }
    let (mut diff, mut sum) = (0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (u, v) = (x as f64 / na, y as f64 / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    let d = 2.0 * diff.sqrt().atan2(sum.sqrt()) / std::f64::consts::PI;
    Ok(d.clamp(0.0, 1.0))
}

/// Token-averaged distance between two consecutive layer passes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileEntry {
    pub from: PassLabel,
    pub to: PassLabel,
    pub mean_distance: f64,
}

impl ProfileEntry {
    /// True when the pair straddles the self-decoder/cross-decoder interface.
    pub fn crosses_blocks(&self) -> bool {
        self.from.block != self.to.block
    }

    /// True when the pair straddles two iterations of a looped stack.
    pub fn crosses_loop(&self) -> bool {
        self.from.block == self.to.block && self.from.iteration != self.to.iteration
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub entries: Vec<ProfileEntry>,
    pub n_sequences: usize,
    pub n_tokens: usize,
}

pub const AVERAGING: &str = "token-then-batch";

impl Profile {
    /// Distance at the block interface, if the model has one.
    pub fn boundary(&self) -> Option<&ProfileEntry> {
        self.entries.iter().find(|e| e.crosses_blocks())
    }

    /// Mean over entries that stay within one block.
    pub fn within_block_mean(&self) -> Option<f64> {
        let inner: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| !e.crosses_blocks())
            .map(|e| e.mean_distance)
            .collect();
        (!inner.is_empty()).then(|| inner.iter().sum::<f64>() / inner.len() as f64)
    }

    /// CSV with `#` metadata lines; each row is labelled by its later pass.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# averaging={AVERAGING}");
        let _ = writeln!(s, "# sequences={} tokens={}", self.n_sequences, self.n_tokens);
        s.push_str("index,block,layer,iteration,mean_distance\n");
        for (i, e) in self.entries.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{},{},{:.8}",
                e.to.block.name(),
                e.to.layer,
                e.to.iteration,
                e.mean_distance
            );
        }
        s
    }
}

/// Records the hidden state after every layer pass for one sequence.
pub fn capture_trace(cfg: &ModelConfig, params: &ModelParams, tokens: &[usize]) -> Result<LayerTrace> {
    params.check_against(cfg)?;
    let mut tape = Tape::new();
    let w = params.bind(&mut tape, false);
    let mut trace = LayerTrace::new();
    forward_hidden(&mut tape, cfg, &w, tokens, &[tokens.len()], Some(&mut trace))?;
    Ok(trace)
}

/// Distances between consecutive layer passes, averaged over the tokens of
/// each sequence and then over sequences.
pub fn layer_profile(cfg: &ModelConfig, params: &ModelParams, batch: &[Vec<usize>]) -> Result<Profile> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("profile batch is empty".into()));
    }
    let mut sums: Vec<f64> = Vec::new();
    let mut labels: Vec<(PassLabel, PassLabel)> = Vec::new();
    let mut n_tokens = 0;
    for tokens in batch {
        let trace = capture_trace(cfg, params, tokens)?;
        let pairs = trace.entries().windows(2);
        if sums.is_empty() {
            sums = vec![0.0; pairs.len()];
            labels = trace.entries().windows(2).map(|p| (p[0].0, p[1].0)).collect();
        }
        for (k, p) in pairs.enumerate() {
            let (x, y) = (&p[0].1, &p[1].1);
            let mut acc = 0.0;
            for r in 0..x.rows() {
                acc += angular_distance(x.row(r), y.row(r))?;
            }
            sums[k] += acc / x.rows() as f64;
        }
        n_tokens += tokens.len();
    }
    let entries = labels
        .into_iter()
        .zip(sums)
        .map(|((from, to), s)| ProfileEntry {
            from,
            to,
            mean_distance: s / batch.len() as f64,
        })
        .collect();
    Ok(Profile {
        entries,
        n_sequences: batch.len(),
        n_tokens,
    })
}

/// Number of consecutive-pass pairs a profile of `cfg` contains.
pub fn profile_len(cfg: &ModelConfig) -> usize {
    cfg.total_layer_passes().saturating_sub(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Family, LoopPosition};
    use crate::model::build_model;

    #[test]
    fn distance_axioms() {
        let a = [1.0, 2.0, -3.0];
        assert_eq!(angular_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(angular_distance(&a, &[-1.0, -2.0, 3.0]).unwrap(), 1.0);
        let d = angular_distance(&[1.0, 0.0], &[0.0, 5.0]).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_vector_is_an_error() {
        assert!(angular_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(angular_distance(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn matches_arccos_form() {
        let (a, b) = ([0.3f32, -1.2, 2.0, 0.5], [1.1f32, 0.4, -0.7, 2.2]);
        let dot: f64 = a.iter().zip(&b).map(|(&x, &y)| x as f64 * y as f64).sum();
        let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let want = (dot / (na * nb)).clamp(-1.0, 1.0).acos() / std::f64::consts::PI;
        assert!((angular_distance(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn uyoco_profile_length() {
        let cfg = ModelConfig::desk(Family::Uyoco);
        let params = build_model(&cfg).unwrap();
        let p = layer_profile(&cfg, &params, &[vec![1, 2, 3, 4, 5]]).unwrap();
        assert_eq!(p.entries.len(), 2 * 3 + 2 - 1);
        assert_eq!(p.entries.len(), profile_len(&cfg));
        assert_eq!(p.entries.iter().filter(|e| e.crosses_blocks()).count(), 1);
        assert_eq!(p.entries.iter().filter(|e| e.crosses_loop()).count(), 2);
        assert!(p.entries.iter().all(|e| (0.0..=1.0).contains(&e.mean_distance)));
        let csv = p.to_csv();
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 7);
    }

    #[test]
    fn upper_loop_variants_profile_every_pass() {
        for pos in [LoopPosition::CrossDecoderSharedKv, LoopPosition::CrossDecoderSelfAttn] {
            let mut cfg = ModelConfig::desk(Family::Uyoco);
            cfg.loop_position = pos;
            let params = build_model(&cfg).unwrap();
            let p = layer_profile(&cfg, &params, &[vec![7, 8, 9]]).unwrap();
            assert_eq!(p.entries.len(), 2 + 2 * 3 - 1);
        }
    }

    #[test]
    fn zeroed_residual_branches_give_zero_distance() {
        let cfg = ModelConfig::desk(Family::Uyoco);
        let mut params = build_model(&cfg).unwrap();
        for l in &mut params.self_layers {
            l.wo = Tensor::zeros(l.wo.shape());
            l.ffn.w_down = Tensor::zeros(l.ffn.w_down.shape());
        }
        for l in &mut params.cross_layers {
            l.wo = Tensor::zeros(l.wo.shape());
            l.ffn.w_down = Tensor::zeros(l.ffn.w_down.shape());
        }
        let p = layer_profile(&cfg, &params, &[vec![3, 1, 4], vec![1, 5, 9]]).unwrap();
        assert!(p.entries.iter().all(|e| e.mean_distance == 0.0));
    }

    #[test]
    fn empty_batch_rejected() {
        let cfg = ModelConfig::desk(Family::Yoco);
        let params = build_model(&cfg).unwrap();
        assert!(layer_profile(&cfg, &params, &[]).is_err());
    }
}
