use std::collections::BTreeSet;

use super::set::LabeledSet;
use super::synthetic::CilDataset;
use crate::error::{CilError, Result};
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    /// Classes introduced by this session, in stream order.
    pub classes: Vec<usize>,
    pub train: LabeledSet,
    pub test: LabeledSet,
}

/// Sessions with pairwise disjoint label sets.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionStream {
    pub sessions: Vec<Session>,
}

impl SessionStream {
    /// Checks label disjointness and that each split only holds its
    /// session's classes.
    pub fn new(sessions: Vec<Session>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (t, s) in sessions.iter().enumerate() {
            let own: BTreeSet<usize> = s.classes.iter().copied().collect();
            if own.len() != s.classes.len() {
                return Err(CilError::contract(format!("session {t} lists a class twice")));
            }
            if let Some(c) = own.iter().find(|c| seen.contains(*c)) {
                return Err(CilError::contract(format!("class {c} appears in more than one session")));
            }
            seen.extend(own.iter().copied());
            for split in [&s.train, &s.test] {
                if let Some(l) = split.labels.iter().find(|l| !own.contains(l)) {
                    return Err(CilError::contract(format!("session {t} holds a sample of foreign class {l}")));
                }
            }
        }
        Ok(Self { sessions })
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.sessions.first().map_or(0, |s| s.train.dim())
    }

    /// Classes of sessions `0..=t`.
    pub fn seen_classes(&self, t: usize) -> Vec<usize> {
        self.sessions[..=t].iter().flat_map(|s| s.classes.iter().copied()).collect()
    }

    /// Union of the test sets of sessions `0..=t`.
    pub fn cumulative_test(&self, t: usize) -> Result<LabeledSet> {
        let parts: Vec<&LabeledSet> = self.sessions[..=t].iter().map(|s| &s.test).collect();
        LabeledSet::concat(&parts)
    }

    /// Union of the train sets of sessions `0..=t`.
    pub fn cumulative_train(&self, t: usize) -> Result<LabeledSet> {
        let parts: Vec<&LabeledSet> = self.sessions[..=t].iter().map(|s| &s.train).collect();
        LabeledSet::concat(&parts)
    }
}

fn gather_classes(set: &LabeledSet, classes: &[usize]) -> Result<LabeledSet> {
    let idx: Vec<usize> = classes.iter().flat_map(|&c| set.indices_of(c)).collect();
    Ok(set.subset(&idx))
}

/// Permutes the classes with `class_order_seed` and cuts them into `T`
/// contiguous sessions. When `T` does not divide the class count the first
/// `K mod T` sessions take one extra class.
pub fn split_cil(data: &CilDataset, sessions: usize, class_order_seed: u64) -> Result<SessionStream> {
    let mut classes = data.train.classes();
    let k = classes.len();
    if sessions == 0 || sessions > k {
        return Err(CilError::contract(format!("cannot split {k} classes into {sessions} sessions")));
    }
    Rng::new(class_order_seed).shuffle(&mut classes);
    let (base, extra) = (k / sessions, k % sessions);
    let mut out = Vec::with_capacity(sessions);
    let mut start = 0;
    for t in 0..sessions {
        let len = base + usize::from(t < extra);
        let own = classes[start..start + len].to_vec();
        start += len;
        out.push(Session {
            train: gather_classes(&data.train, &own)?,
            test: gather_classes(&data.test, &own)?,
            classes: own,
        });
    }
    SessionStream::new(out)
}

/// Keeps exactly `shots` training samples per class in sessions
/// `from_session..` (1-based, so the first session is never reduced).
/// Selection per class is a seeded permutation; test sets are untouched.
pub fn fewshot_subsample(stream: &SessionStream, shots: usize, from_session: usize, seed: u64) -> Result<SessionStream> {
    if shots == 0 || from_session < 2 {
        return Err(CilError::contract(format!(
            "few-shot needs shots ≥ 1 and from_session ≥ 2, got {shots} and {from_session}"
        )));
    }
    let rng = Rng::new(seed);
    let mut sessions = stream.sessions.clone();
    for s in sessions.iter_mut().skip(from_session - 1) {
        let mut keep = Vec::new();
        for &c in &s.classes {
            let idx = s.train.indices_of(c);
            if shots > idx.len() {
                return Err(CilError::contract(format!(
                    "class {c} has {} training samples, {shots} requested",
                    idx.len()
                )));
            }
            let mut pick: Vec<usize> = rng.derive(c as u64).permutation(idx.len())[..shots].iter().map(|&i| idx[i]).collect();
            pick.sort_unstable();
            keep.extend(pick);
        }
        s.train = s.train.subset(&keep);
    }
    SessionStream::new(sessions)
}
