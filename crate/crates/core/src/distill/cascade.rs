//! Interactive block-parity reconciliation.
//!
//! The receiver drives the protocol and corrects its own key; the sender only
//! answers parity queries over ranges of a shared per-pass permutation. Pass
//! `p` uses blocks of `k1 * 2^p` bits with `k1 = ceil(0.73 / qber_hint)`.
//! After each pass, every block whose parity disagrees is bisected, and each
//! correction is propagated to all earlier passes: any block that turns odd
//! there is bisected too, lowest pass first. Reconciliation stops at the
//! first pass whose top-level parities all agree, but never before
//! `min_passes` passes: stopping at an early clean pass leaves error pairs
//! hidden in shared blocks noticeably more often.
//!
//! Queries are batched: all top-level parities of a pass go out together,
//! and concurrent bisections advance one level per batch. The same queries
//! are issued whether the sender is local or remote, so leakage counts agree.

use std::convert::Infallible;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;

use super::{KeyMaterial, Stage};
use crate::rng::stream;
use crate::sim::Bits;

/// Parity of `key[perm[start..end]]` within pass `pass`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParityQuery {
    pub pass: u32,
    pub start: u32,
    pub end: u32,
}

pub trait ParityOracle {
    type Error;
    fn parities(&mut self, queries: &[ParityQuery]) -> Result<Vec<bool>, Self::Error>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CascadeParams {
    /// A clean pass ends reconciliation only once this many passes have run.
    pub min_passes: u32,
    pub max_passes: u32,
    /// Shared seed for the pass permutations.
    pub seed: u64,
}

impl CascadeParams {
    pub fn new(seed: u64) -> Self {
        CascadeParams {
            min_passes: 4,
            max_passes: 4,
            seed,
        }
    }
}

/// Pass 0 keeps the natural order; later passes are seeded shuffles.
pub fn pass_permutation(n: usize, seed: u64, pass: u32) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..n as u32).collect();
    if pass > 0 {
        perm.shuffle(&mut stream(seed, &format!("cascade-pass-{pass}")));
    }
    perm
}

pub fn block_parity(key: &Bits, perm: &[u32], start: u32, end: u32) -> bool {
    perm[start as usize..end as usize]
        .iter()
        .fold(false, |acc, &i| acc ^ key[i as usize])
}

/// Answers queries from a key held in memory.
pub struct LocalParitySource<'a> {
    key: &'a Bits,
    seed: u64,
    perms: Vec<Vec<u32>>,
    pub answered: u64,
}

impl<'a> LocalParitySource<'a> {
    pub fn new(key: &'a Bits, seed: u64) -> Self {
        LocalParitySource {
            key,
            seed,
            perms: Vec::new(),
            answered: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("parity query {query:?} is out of range for a {len}-bit key")]
pub struct BadQuery {
    pub query: ParityQuery,
    pub len: usize,
}

impl ParityOracle for LocalParitySource<'_> {
    type Error = BadQuery;

    fn parities(&mut self, queries: &[ParityQuery]) -> Result<Vec<bool>, BadQuery> {
        let n = self.key.len();
        queries
            .iter()
            .map(|&q| {
                if q.start >= q.end || q.end as usize > n || q.pass > 64 {
                    return Err(BadQuery { query: q, len: n });
                }
                while self.perms.len() <= q.pass as usize {
                    let p = self.perms.len() as u32;
                    self.perms.push(pass_permutation(n, self.seed, p));
                }
                self.answered += 1;
                Ok(block_parity(self.key, &self.perms[q.pass as usize], q.start, q.end))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PassRecord {
    pub pass: u32,
    pub block_size: usize,
    /// Parities disclosed while this pass was active, bisections included.
    pub parities: u64,
    /// Receiver positions corrected while this pass was active.
    pub flips: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReconciliationTranscript {
    pub key_len: usize,
    pub seed: u64,
    pub rounds: Vec<PassRecord>,
    pub total_parities: u64,
    pub converged: bool,
}

impl ReconciliationTranscript {
    pub fn flip_count(&self) -> usize {
        self.rounds.iter().map(|r| r.flips.len()).sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "key_len {}", self.key_len);
        let _ = writeln!(s, "permutation_seed {}", self.seed);
        for r in &self.rounds {
            let _ = writeln!(
                s,
                "pass {} block_size {} parities {} flips {}",
                r.pass,
                r.block_size,
                r.parities,
                r.flips.len()
            );
            if !r.flips.is_empty() {
                let list: Vec<String> = r.flips.iter().map(|f| f.to_string()).collect();
                let _ = writeln!(s, "flip_positions {}", list.join(" "));
            }
        }
        let _ = writeln!(s, "total_parities {}", self.total_parities);
        let _ = writeln!(s, "converged {}", self.converged);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reconciled {
    pub key: KeyMaterial,
    pub transcript: ReconciliationTranscript,
}

#[derive(Debug, Error, PartialEq)]
pub enum ReconcileError<E> {
    #[error("qber hint {0} is outside (0, 0.5)")]
    InvalidHint(f64),
    #[error("key lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no clean pass within {passes} passes")]
    NonConvergence {
        passes: u32,
        partial: Box<Reconciled>,
    },
    #[error("parity answers: expected {expected}, got {got}")]
    AnswerCount { expected: usize, got: usize },
    #[error("parity source: {0}")]
    Oracle(E),
}

struct PassState {
    block: usize,
    perm: Vec<u32>,
    rank: Vec<u32>,
    sender: Vec<bool>,
    receiver: Vec<bool>,
}

impl PassState {
    fn odd_blocks(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.sender.len()).filter(|&i| self.sender[i] != self.receiver[i])
    }

    fn toggle(&mut self, pos: usize) {
        let blk = self.rank[pos] as usize / self.block;
        self.receiver[blk] ^= true;
    }

    fn range(&self, blk: usize) -> (u32, u32) {
        let n = self.perm.len();
        ((blk * self.block) as u32, ((blk + 1) * self.block).min(n) as u32)
    }
}

fn ask<O: ParityOracle>(
    oracle: &mut O,
    queries: &[ParityQuery],
) -> Result<Vec<bool>, ReconcileError<O::Error>> {
    let answers = oracle.parities(queries).map_err(ReconcileError::Oracle)?;
    if answers.len() != queries.len() {
        return Err(ReconcileError::AnswerCount {
            expected: queries.len(),
            got: answers.len(),
        });
    }
    Ok(answers)
}

/// Bisects every odd block of one pass in lockstep; returns one error
/// position per block.
fn bisect<O: ParityOracle>(
    oracle: &mut O,
    pass: u32,
    st: &PassState,
    key: &Bits,
    disclosed: &mut u64,
) -> Result<Vec<usize>, ReconcileError<O::Error>> {
    let mut tasks: Vec<(u32, u32, bool)> = st
        .odd_blocks()
        .map(|blk| {
            let (lo, hi) = st.range(blk);
            (lo, hi, st.sender[blk])
        })
        .collect();
    loop {
        let open: Vec<usize> = (0..tasks.len()).filter(|&t| tasks[t].1 - tasks[t].0 > 1).collect();
        if open.is_empty() {
            break;
        }
        let queries: Vec<ParityQuery> = open
            .iter()
            .map(|&t| {
                let (lo, hi, _) = tasks[t];
                ParityQuery {
                    pass,
                    start: lo,
                    end: lo + (hi - lo) / 2,
                }
            })
            .collect();
        let answers = ask(oracle, &queries)?;
        *disclosed += queries.len() as u64;
        for ((&t, q), left) in open.iter().zip(&queries).zip(answers) {
            let (lo, hi, whole) = tasks[t];
            tasks[t] = if left != block_parity(key, &st.perm, lo, q.end) {
                (lo, q.end, left)
            } else {
                (q.end, hi, whole ^ left)
            };
        }
    }
    Ok(tasks.iter().map(|&(lo, _, _)| st.perm[lo as usize] as usize).collect())
}

/// Corrects `b` against the key behind `oracle`.
pub fn reconcile_with<O: ParityOracle>(
    oracle: &mut O,
    b: &KeyMaterial,
    qber_hint: f64,
    params: &CascadeParams,
) -> Result<Reconciled, ReconcileError<O::Error>> {
    if !(qber_hint > 0.0 && qber_hint < 0.5) {
        return Err(ReconcileError::InvalidHint(qber_hint));
    }
    let n = b.len();
    let mut key = b.bits.clone();
    let k1 = ((0.73 / qber_hint).ceil() as usize).max(1);
    let mut passes: Vec<PassState> = Vec::new();
    let mut rounds = Vec::new();
    let mut converged = n == 0;
    let mut total_flips = 0usize;

    for p in 0..if n == 0 { 0 } else { params.max_passes } {
        let block = k1.saturating_mul(1usize.checked_shl(p).unwrap_or(usize::MAX)).min(n);
        let perm = pass_permutation(n, params.seed, p);
        let mut rank = vec![0u32; n];
        for (r, &i) in perm.iter().enumerate() {
            rank[i as usize] = r as u32;
        }
        let queries: Vec<ParityQuery> = (0..n.div_ceil(block))
            .map(|blk| ParityQuery {
                pass: p,
                start: (blk * block) as u32,
                end: ((blk + 1) * block).min(n) as u32,
            })
            .collect();
        let sender = ask(oracle, &queries)?;
        let receiver = queries
            .iter()
            .map(|q| block_parity(&key, &perm, q.start, q.end))
            .collect();
        passes.push(PassState {
            block,
            perm,
            rank,
            sender,
            receiver,
        });
        let mut record = PassRecord {
            pass: p,
            block_size: block,
            parities: queries.len() as u64,
            flips: Vec::new(),
        };
        if passes[p as usize].odd_blocks().next().is_none() {
            rounds.push(record);
            converged = true;
            if p + 1 >= params.min_passes {
                break;
            }
            continue;
        }
        converged = false;
        while let Some(j) = (0..passes.len()).find(|&j| passes[j].odd_blocks().next().is_some()) {
            let found = bisect(oracle, j as u32, &passes[j], &key, &mut record.parities)?;
            for pos in found {
                let v = key[pos];
                key.set(pos, !v);
                for st in passes.iter_mut() {
                    st.toggle(pos);
                }
                record.flips.push(pos);
                total_flips += 1;
            }
            // inconsistent answers could otherwise flip bits back and forth forever
            if total_flips > 2 * n {
                break;
            }
        }
        rounds.push(record);
    }

    let total_parities = rounds.iter().map(|r| r.parities).sum();
    let out = Reconciled {
        key: KeyMaterial {
            bits: key,
            stage: Stage::Reconciled,
            leakage_bits: b.leakage_bits + total_parities,
            session_id: b.session_id,
        },
        transcript: ReconciliationTranscript {
            key_len: n,
            seed: params.seed,
            rounds,
            total_parities,
            converged,
        },
    };
    if converged {
        Ok(out)
    } else {
        Err(ReconcileError::NonConvergence {
            passes: params.max_passes,
            partial: Box::new(out),
        })
    }
}

/// In-process reconciliation of `b` against `a`.
pub fn reconcile(
    a: &KeyMaterial,
    b: &KeyMaterial,
    qber_hint: f64,
    params: &CascadeParams,
) -> Result<Reconciled, ReconcileError<Infallible>> {
    if a.len() != b.len() {
        return Err(ReconcileError::LengthMismatch(a.len(), b.len()));
    }
    let mut source = LocalParitySource::new(&a.bits, params.seed);
    reconcile_with(&mut source, b, qber_hint, params).map_err(|e| match e {
        ReconcileError::InvalidHint(h) => ReconcileError::InvalidHint(h),
        ReconcileError::LengthMismatch(x, y) => ReconcileError::LengthMismatch(x, y),
        ReconcileError::NonConvergence { passes, partial } => {
            ReconcileError::NonConvergence { passes, partial }
        }
        ReconcileError::AnswerCount { expected, got } => ReconcileError::AnswerCount { expected, got },
        ReconcileError::Oracle(BadQuery { query, len }) => {
            unreachable!("engine issued {query:?} for a {len}-bit key")
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::security::binary_entropy;
    use rand::seq::index;
    use rand::Rng;

    fn key(n: usize, seed: u64) -> KeyMaterial {
        let mut rng = stream(seed, "cascade-test");
        KeyMaterial::new((0..n).map(|_| rng.random::<bool>()).collect(), Stage::Sampled, 0)
    }

    fn with_errors(a: &KeyMaterial, count: usize, seed: u64) -> KeyMaterial {
        let mut b = a.clone();
        for i in index::sample(&mut stream(seed, "errors"), a.len(), count).iter() {
            let v = b.bits[i];
            b.bits.set(i, !v);
        }
        b
    }

    #[test]
    fn identical_keys_cost_one_parity_per_block() {
        let a = key(10_000, 1);
        let r = reconcile(&a, &a, 0.01, &CascadeParams::new(3)).unwrap();
        assert_eq!(r.transcript.flip_count(), 0);
        assert_eq!(r.transcript.rounds.len(), 4);
        let blocks: u64 = [73u64, 146, 292, 584].iter().map(|k| 10_000u64.div_ceil(*k)).sum();
        assert_eq!(r.transcript.total_parities, blocks);

        let early = CascadeParams {
            min_passes: 1,
            ..CascadeParams::new(3)
        };
        let r = reconcile(&a, &a, 0.01, &early).unwrap();
        assert_eq!(r.transcript.rounds.len(), 1);
        assert_eq!(r.transcript.total_parities, 10_000u64.div_ceil(73));
        assert_eq!(r.key.leakage_bits, r.transcript.total_parities);
        assert_eq!(r.key.bits, a.bits);
    }

    #[test]
    fn single_flip_in_one_block() {
        let a = key(1024, 2);
        let b = with_errors(&a, 1, 4);
        let r = reconcile(&a, &b, 0.73 / 1024.0, &CascadeParams::new(5)).unwrap();
        let first = &r.transcript.rounds[0];
        assert_eq!(first.block_size, 1024);
        assert_eq!(first.parities, 11);
        assert_eq!(first.flips.len(), 1);
        assert_eq!(r.key.bits, a.bits);
        // passes 1 to 3 each confirm with one whole-key parity
        assert_eq!(r.transcript.total_parities, 14);
    }

    #[test]
    fn empty_key() {
        let a = key(0, 1);
        let r = reconcile(&a, &a, 0.02, &CascadeParams::new(0)).unwrap();
        assert!(r.key.is_empty() && r.transcript.converged);
        assert_eq!(r.transcript.total_parities, 0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = key(10, 1);
        assert!(matches!(reconcile(&a, &a, 0.0, &CascadeParams::new(0)), Err(ReconcileError::InvalidHint(_))));
        assert!(matches!(reconcile(&a, &a, 0.5, &CascadeParams::new(0)), Err(ReconcileError::InvalidHint(_))));
        assert!(matches!(
            reconcile(&a, &key(11, 1), 0.1, &CascadeParams::new(0)),
            Err(ReconcileError::LengthMismatch(10, 11))
        ));
    }

    #[test]
    fn one_pass_budget_reports_non_convergence_with_partial_result() {
        let a = key(5000, 7);
        let b = with_errors(&a, 100, 8);
        let params = CascadeParams {
            min_passes: 1,
            max_passes: 1,
            seed: 1,
        };
        match reconcile(&a, &b, 0.02, &params) {
            Err(ReconcileError::NonConvergence { partial, .. }) => {
                assert!(!partial.transcript.converged);
                assert!(partial.transcript.flip_count() > 0);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn leakage_near_entropy_at_ten_km_error_rate() {
        let n = 100_000;
        let e = 0.015;
        let h = binary_entropy(e);
        for seed in 0..3 {
            let a = key(n, 10 + seed);
            let b = with_errors(&a, (e * n as f64) as usize, 20 + seed);
            let r = reconcile(&a, &b, e, &CascadeParams::new(seed)).unwrap();
            assert_eq!(r.key.bits, a.bits);
            let ratio = r.transcript.total_parities as f64 / n as f64;
            assert!(ratio >= h && ratio <= 1.35 * h, "leakage/n {ratio} vs h2 {h}");
        }
    }

    #[test]
    fn local_source_rejects_bad_ranges() {
        let a = key(8, 1);
        let mut src = LocalParitySource::new(&a.bits, 0);
        let q = ParityQuery { pass: 0, start: 3, end: 9 };
        assert_eq!(src.parities(&[q]), Err(BadQuery { query: q, len: 8 }));
        let q = ParityQuery { pass: 1, start: 3, end: 3 };
        assert!(src.parities(&[q]).is_err());
    }

    #[test]
    fn transcript_text_lists_flips() {
        let a = key(2000, 3);
        let b = with_errors(&a, 3, 9);
        let r = reconcile(&a, &b, 0.01, &CascadeParams::new(2)).unwrap();
        let text = r.transcript.to_text();
        assert!(text.starts_with("key_len 2000\n"));
        assert!(text.contains("flip_positions "));
        assert!(text.ends_with(&format!("total_parities {}\nconverged true\n", r.transcript.total_parities)));
    }
}
