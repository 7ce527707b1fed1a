//! Stochastic corruption for masked-diffusion training.
//!
//! The base process masks each maskable position independently with the drawn
//! noise level. Whole-entity mode then applies a contagion rule: if any token
//! of an entity span was selected, the entire span is masked, so entities are
//! corrupted all-or-nothing. Prompt-conditioned corruption leaves the prompt
//! region untouched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::vocab::{AnnotatedSequence, Vocabulary};

/// Lower bound of the per-example noise schedule; avoids zero-mask draws in
/// expectation without changing the fixed-noise marginals.
pub const NOISE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Token,
    WholeEntity,
}

/// Corruption request: a noise level in (0, 1], the masking mode, and whether
/// the prompt region is exempt.
#[derive(Debug, Clone, Copy)]
pub struct MaskSpec {
    pub noise_level: f64,
    pub mode: MaskMode,
    pub respect_prompt: bool,
}

impl MaskSpec {
    pub fn new(noise_level: f64, mode: MaskMode, respect_prompt: bool) -> MaskSpec {
        assert!(
            noise_level > 0.0 && noise_level <= 1.0,
            "noise level must lie in (0, 1], got {noise_level}"
        );
        MaskSpec {
            noise_level,
            mode,
            respect_prompt,
        }
    }
}

/// Draw a per-example noise level t ~ Uniform(NOISE_FLOOR, 1].
pub fn draw_noise_level(rng: &mut impl Rng) -> f64 {
    // gen::<f64>() yields [0, 1); flip to (0, 1] then rescale onto (floor, 1].
    let u = 1.0 - rng.gen::<f64>();
    NOISE_FLOOR + (1.0 - NOISE_FLOOR) * u
}

/// Per-position binary mask plus the noise level that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVector {
    pub bits: Vec<u8>,
    pub noise_level: f64,
}

impl MaskVector {
    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

/// Token sequence with MASK substituted at selected positions.
#[derive(Debug, Clone)]
pub struct CorruptedSequence {
    pub ids: Vec<u32>,
    pub mask: MaskVector,
    pub clean_ids: Vec<u32>,
}

/// Resolve overlapping entity spans to a disjoint set.
///
/// Nested spans are dropped in favor of the longer (longest-match-first);
/// partial overlaps keep the leftmost-longest span and truncate the right
/// neighbor. A truncated remnant re-enters the candidate pool at its new start
/// and competes there, so the surviving leftmost-longest span always wins.
/// Output is sorted by start index.
pub fn resolve_spans(spans: &[(usize, usize)]) -> Vec<(usize, usize)> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;
    // Pop order: smallest start first, longest span first on ties.
    let mut heap: BinaryHeap<Reverse<(usize, Reverse<usize>)>> = spans
        .iter()
        .map(|&(i, j)| Reverse((i, Reverse(j))))
        .collect();
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(spans.len());
    while let Some(Reverse((i, Reverse(j)))) = heap.pop() {
        match out.last() {
            Some(&(_, last_end)) if j <= last_end => {} // nested: drop
            Some(&(_, last_end)) if i <= last_end => {
                heap.push(Reverse((last_end + 1, Reverse(j))));
            }
            _ => out.push((i, j)),
        }
    }
    out
}

/// Independent Bernoulli(noise_level) mask over maskable positions.
/// The prompt region is excluded when the spec respects it.
pub fn sample_base_mask(seq: &AnnotatedSequence, spec: &MaskSpec, rng: &mut impl Rng) -> MaskVector {
    let start = if spec.respect_prompt { seq.prompt_len } else { 0 };
    let mut bits = vec![0u8; seq.ids.len()];
    for bit in bits.iter_mut().skip(start) {
        if rng.gen::<f64>() < spec.noise_level {
            *bit = 1;
        }
    }
    MaskVector {
        bits,
        noise_level: spec.noise_level,
    }
}

/// Entity-level contagion: any selected token inside a span masks the whole
/// span; positions outside all spans keep their provisional bit. Idempotent
/// and monotone (never clears a bit). Spans must already be disjoint.
pub fn apply_wem(seq: &AnnotatedSequence, provisional: &MaskVector) -> MaskVector {
    let mut bits = provisional.bits.clone();
    for &(i, j) in &seq.entity_spans {
        if provisional.bits[i..=j].contains(&1) {
            bits[i..=j].fill(1);
        }
    }
    MaskVector {
        bits,
        noise_level: provisional.noise_level,
    }
}

/// Sample a mask per the spec (base process, then contagion in whole-entity
/// mode) and substitute MASK at the selected positions.
pub fn corrupt(
    seq: &AnnotatedSequence,
    spec: &MaskSpec,
    vocab: &Vocabulary,
    rng: &mut impl Rng,
) -> CorruptedSequence {
    let provisional = sample_base_mask(seq, spec, rng);
    let mask = match spec.mode {
        MaskMode::Token => provisional,
        MaskMode::WholeEntity => apply_wem(seq, &provisional),
    };
    apply_mask(seq, mask, vocab)
}

/// Substitute MASK wherever the bit is set.
pub fn apply_mask(seq: &AnnotatedSequence, mask: MaskVector, vocab: &Vocabulary) -> CorruptedSequence {
    debug_assert_eq!(mask.bits.len(), seq.ids.len());
    let ids = seq
        .ids
        .iter()
        .zip(&mask.bits)
        .map(|(&id, &b)| if b == 1 { vocab.mask } else { id })
        .collect();
    CorruptedSequence {
        ids,
        mask,
        clean_ids: seq.ids.clone(),
    }
}

/// Deterministic cloze mask covering exactly the relation spans; used for the
/// inverse-relation records, whose supervision target is the relation
/// descriptor alone.
pub fn relation_cloze_mask(seq: &AnnotatedSequence) -> MaskVector {
    let mut bits = vec![0u8; seq.ids.len()];
    for &(i, j) in &seq.relation_spans {
        bits[i..=j].fill(1);
    }
    MaskVector {
        bits,
        noise_level: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;

    fn seq(n: usize, entity_spans: Vec<(usize, usize)>, prompt_len: usize) -> AnnotatedSequence {
        AnnotatedSequence {
            ids: (10..10 + n as u32).collect(),
            entity_spans,
            relation_spans: vec![],
            prompt_len,
        }
    }

    fn tiny_vocab() -> Vocabulary {
        Vocabulary::from_texts(["a b c d e f g h i j k l"])
    }

    /// Direct per-position evaluation of the contagion case split; the oracle
    /// the fast path is checked against.
    fn wem_oracle(spans: &[(usize, usize)], provisional: &[u8]) -> Vec<u8> {
        (0..provisional.len())
            .map(|k| {
                for &(i, j) in spans {
                    if k >= i && k <= j && provisional[i..=j].iter().any(|&m| m == 1) {
                        return 1;
                    }
                }
                provisional[k]
            })
            .collect()
    }

    /// Independent route for span resolution: repeatedly pick the
    /// leftmost-longest candidate, emit it, and clip the remaining candidates
    /// to its right.
    fn resolve_oracle(spans: &[(usize, usize)]) -> Vec<(usize, usize)> {
        let mut remaining: Vec<(usize, usize)> = spans.to_vec();
        let mut out = Vec::new();
        while !remaining.is_empty() {
            let &best = remaining
                .iter()
                .min_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
                .unwrap();
            out.push(best);
            remaining = remaining
                .into_iter()
                .filter(|&s| s != best)
                .filter_map(|(i, j)| {
                    if j <= best.1 {
                        None
                    } else if i <= best.1 {
                        Some((best.1 + 1, j))
                    } else {
                        Some((i, j))
                    }
                })
                .collect();
            // A clipped span may now nest inside a later one; dedup exact repeats.
            remaining.dedup();
        }
        out.sort();
        out.dedup();
        out
    }

    #[test]
    fn nested_span_resolves_to_longest() {
        assert_eq!(resolve_spans(&[(0, 1), (0, 2)]), vec![(0, 2)]);
        assert_eq!(resolve_spans(&[(0, 2), (0, 1)]), vec![(0, 2)]);
    }

    #[test]
    fn disjoint_spans_unchanged() {
        assert_eq!(resolve_spans(&[(0, 1), (3, 4)]), vec![(0, 1), (3, 4)]);
    }

    #[test]
    fn partial_overlap_truncates_right_neighbor() {
        assert_eq!(resolve_spans(&[(0, 2), (2, 4)]), vec![(0, 2), (3, 4)]);
    }

    #[test]
    fn resolve_matches_oracle_on_all_small_cases() {
        // Every set of up to three spans over six positions.
        let mut all: Vec<(usize, usize)> = Vec::new();
        for i in 0..6 {
            for j in i..6 {
                all.push((i, j));
            }
        }
        for a in 0..all.len() {
            for b in a..all.len() {
                for c in b..all.len() {
                    let spans = vec![all[a], all[b], all[c]];
                    let got = resolve_spans(&spans);
                    let want = resolve_oracle(&spans);
                    assert_eq!(got, want, "spans {spans:?}");
                    // Output spans are pairwise disjoint and sorted.
                    for w in got.windows(2) {
                        assert!(w[0].1 < w[1].0);
                    }
                }
            }
        }
    }

    #[test]
    fn full_noise_masks_everything_maskable() {
        let s = seq(6, vec![], 0);
        let spec = MaskSpec::new(1.0, MaskMode::Token, false);
        let mut rng = seeded_rng(0, "t");
        let m = sample_base_mask(&s, &spec, &mut rng);
        assert!(m.bits.iter().all(|&b| b == 1));
    }

    #[test]
    fn prompt_region_is_immune() {
        let s = seq(6, vec![], 6);
        let spec = MaskSpec::new(1.0, MaskMode::Token, true);
        let mut rng = seeded_rng(0, "t");
        let m = sample_base_mask(&s, &spec, &mut rng);
        assert!(m.bits.iter().all(|&b| b == 0));
    }

    #[test]
    fn empirical_rate_tracks_noise_level() {
        // Monte-Carlo: a million positions at t = 0.5 within a 3-sigma window.
        let s = seq(1000, vec![], 0);
        let spec = MaskSpec::new(0.5, MaskMode::Token, false);
        let mut rng = seeded_rng(42, "rate");
        let mut ones = 0usize;
        for _ in 0..1000 {
            ones += sample_base_mask(&s, &spec, &mut rng).count_ones();
        }
        let rate = ones as f64 / 1_000_000.0;
        assert!((0.495..=0.505).contains(&rate), "rate {rate}");
    }

    #[test]
    fn contagion_extends_partial_entity_hits() {
        // "New York is big" with the entity over the first two tokens: masking
        // only the first token must drag the second along.
        let s = seq(4, vec![(0, 1)], 0);
        let provisional = MaskVector {
            bits: vec![1, 0, 0, 0],
            noise_level: 0.3,
        };
        let m = apply_wem(&s, &provisional);
        assert_eq!(m.bits, vec![1, 1, 0, 0]);
    }

    #[test]
    fn contagion_identity_on_zero_mask() {
        let s = seq(5, vec![(1, 3)], 0);
        let provisional = MaskVector {
            bits: vec![0; 5],
            noise_level: 0.3,
        };
        assert_eq!(apply_wem(&s, &provisional).bits, vec![0; 5]);
    }

    #[test]
    fn contagion_matches_oracle_exhaustively_small() {
        // All disjoint span pairs over 6 positions, all 64 provisional masks.
        let mut span_sets: Vec<Vec<(usize, usize)>> = vec![vec![]];
        for i in 0..6 {
            for j in i..6 {
                span_sets.push(vec![(i, j)]);
                for k in j + 1..6 {
                    for l in k..6 {
                        span_sets.push(vec![(i, j), (k, l)]);
                    }
                }
            }
        }
        for spans in &span_sets {
            let s = seq(6, spans.clone(), 0);
            for bits in 0u32..64 {
                let provisional = MaskVector {
                    bits: (0..6).map(|k| ((bits >> k) & 1) as u8).collect(),
                    noise_level: 0.5,
                };
                let got = apply_wem(&s, &provisional);
                assert_eq!(got.bits, wem_oracle(spans, &provisional.bits));
            }
        }
    }

    #[test]
    fn corrupt_composes_and_respects_mode() {
        let vocab = tiny_vocab();
        let s = AnnotatedSequence {
            ids: vec![4, 5, 6, 7],
            entity_spans: vec![(0, 1)],
            relation_spans: vec![],
            prompt_len: 0,
        };
        let mut rng = seeded_rng(7, "c");
        let spec = MaskSpec::new(0.5, MaskMode::WholeEntity, false);
        for _ in 0..200 {
            let c = corrupt(&s, &spec, &vocab, &mut rng);
            // No partially masked entity, and substitution matches the bits.
            assert_eq!(c.mask.bits[0], c.mask.bits[1]);
            for (k, &b) in c.mask.bits.iter().enumerate() {
                if b == 1 {
                    assert_eq!(c.ids[k], vocab.mask);
                } else {
                    assert_eq!(c.ids[k], c.clean_ids[k]);
                }
            }
        }
    }

    #[test]
    fn token_mode_produces_partial_entities() {
        // The control condition: independent masking fragments entities with
        // positive frequency.
        let vocab = tiny_vocab();
        let s = AnnotatedSequence {
            ids: vec![4, 5, 6, 7],
            entity_spans: vec![(0, 1)],
            relation_spans: vec![],
            prompt_len: 0,
        };
        let mut rng = seeded_rng(3, "p");
        let spec = MaskSpec::new(0.5, MaskMode::Token, false);
        let mut partial = 0;
        for _ in 0..500 {
            let c = corrupt(&s, &spec, &vocab, &mut rng);
            if c.mask.bits[0] != c.mask.bits[1] {
                partial += 1;
            }
        }
        assert!(partial > 0);
    }

    #[test]
    fn full_noise_with_prompt_masks_response_only() {
        let vocab = tiny_vocab();
        let s = AnnotatedSequence {
            ids: vec![4, 5, 6, 7, 8],
            entity_spans: vec![(3, 4)],
            relation_spans: vec![],
            prompt_len: 3,
        };
        let mut rng = seeded_rng(5, "b");
        let spec = MaskSpec::new(1.0, MaskMode::WholeEntity, true);
        let c = corrupt(&s, &spec, &vocab, &mut rng);
        assert_eq!(c.mask.bits, vec![0, 0, 0, 1, 1]);
        assert_eq!(&c.ids[..3], &c.clean_ids[..3]);
    }

    #[test]
    fn relation_cloze_targets_relation_span_only() {
        let s = AnnotatedSequence {
            ids: vec![4, 5, 6, 7, 8],
            entity_spans: vec![(0, 0)],
            relation_spans: vec![(3, 3)],
            prompt_len: 3,
        };
        let m = relation_cloze_mask(&s);
        assert_eq!(m.bits, vec![0, 0, 0, 1, 0]);
    }

    #[test]
    fn noise_draws_stay_in_range() {
        let mut rng = seeded_rng(1, "n");
        for _ in 0..10_000 {
            let t = draw_noise_level(&mut rng);
            assert!(t > 0.0 && t <= 1.0 && t >= NOISE_FLOOR);
        }
    }

    proptest::proptest! {
        // Monotonicity: contagion never clears a bit.
        #[test]
        fn contagion_is_monotone(bits in proptest::collection::vec(0u8..2, 12), i in 0usize..12, len in 0usize..4) {
            let j = (i + len).min(11);
            let s = seq(12, vec![(i, j)], 0);
            let provisional = MaskVector { bits, noise_level: 0.5 };
            let out = apply_wem(&s, &provisional);
            for (a, b) in provisional.bits.iter().zip(&out.bits) {
                proptest::prop_assert!(b >= a);
            }
        }

        // Idempotence: a second application changes nothing.
        #[test]
        fn contagion_is_idempotent(bits in proptest::collection::vec(0u8..2, 12), i in 0usize..12, len in 0usize..4) {
            let j = (i + len).min(11);
            let s = seq(12, vec![(i, j)], 0);
            let once = apply_wem(&s, &MaskVector { bits, noise_level: 0.5 });
            let twice = apply_wem(&s, &once);
            proptest::prop_assert_eq!(once.bits, twice.bits);
        }
    }
}
