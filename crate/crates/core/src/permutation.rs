//! Sequence, hidden-dimension and factorized 2D permutations of captures.
//!
//! A permutation `p` acts on a slice by gathering: `apply(p, x)[i] = x[p[i]]`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::capture::HiddenCapture;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

/// Bijection on `0..n` stored as an index array.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let n = indices.len();
        let mut seen = vec![false; n];
        for &i in &indices {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Key(format!(
                    "{indices:?} is not a permutation of 0..{n}"
                )));
            }
        }
        Ok(Self(indices))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    #[inline]
    pub fn at(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p] = i;
        }
        Self(inv)
    }

    /// `self.then(other)` gathers by `self` first, then by `other`:
    /// `apply(self.then(other), x) == apply(other, apply(self, x))`.
    pub fn then(&self, other: &Permutation) -> Self {
        Self(other.0.iter().map(|&j| self.0[j]).collect())
    }

    pub fn apply<T: Copy>(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.0.len());
        self.0.iter().map(|&i| x[i]).collect()
    }

    pub fn apply_into<T: Copy>(&self, x: &[T], out: &mut [T]) {
        for (o, &i) in out.iter_mut().zip(&self.0) {
            *o = x[i];
        }
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Permutation::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

/// Uniform permutation of `0..n` by Fisher-Yates shuffling.
pub fn sample_perm(n: usize, rng: &mut SeededRng) -> Result<Permutation> {
    if n == 0 {
        return Err(Error::Domain(
            "cannot sample a permutation of 0 elements".into(),
        ));
    }
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    Ok(Permutation(v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PermKind {
    None,
    Seq,
    Hidden,
    Factorized,
}

impl PermKind {
    pub const ALL: [PermKind; 4] = [
        PermKind::None,
        PermKind::Seq,
        PermKind::Hidden,
        PermKind::Factorized,
    ];

    pub fn tag(self) -> u32 {
        match self {
            PermKind::None => 0,
            PermKind::Seq => 1,
            PermKind::Hidden => 2,
            PermKind::Factorized => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == tag)
            .ok_or_else(|| Error::Format(format!("unknown permutation tag {tag}")))
    }

    pub fn permutes_rows(self) -> bool {
        matches!(self, PermKind::Seq | PermKind::Factorized)
    }

    pub fn permutes_hidden(self) -> bool {
        matches!(self, PermKind::Hidden | PermKind::Factorized)
    }

    pub fn name(self) -> &'static str {
        match self {
            PermKind::None => "none",
            PermKind::Seq => "seq",
            PermKind::Hidden => "hidden",
            PermKind::Factorized => "factorized",
        }
    }
}

impl fmt::Display for PermKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PermKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "unpermuted" => Ok(PermKind::None),
            "seq" | "sequence" => Ok(PermKind::Seq),
            "hidden" => Ok(PermKind::Hidden),
            "factorized" | "2d" => Ok(PermKind::Factorized),
            other => Err(Error::Domain(format!("unknown permutation kind {other:?}"))),
        }
    }
}

/// A concrete sequence permutation `sigma` and/or per-row hidden
/// permutations `pi_i`, sampled for one `N x d` capture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationSpec {
    pub kind: PermKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<Permutation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<Permutation>>,
    pub seed: u64,
}

impl PermutationSpec {
    pub fn none(seed: u64) -> Self {
        Self {
            kind: PermKind::None,
            seq: None,
            hidden: None,
            seed,
        }
    }

    pub fn sample(kind: PermKind, rows: usize, dim: usize, seed: u64) -> Result<Self> {
        let root = SeededRng::new(seed).substream("perm-spec");
        let seq = if kind.permutes_rows() {
            Some(sample_perm(rows, &mut root.substream("seq"))?)
        } else {
            None
        };
        let hidden = if kind.permutes_hidden() {
            let mut rng = root.substream("hidden");
            Some(
                (0..rows)
                    .map(|_| sample_perm(dim, &mut rng))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            kind,
            seq,
            hidden,
            seed,
        })
    }

    pub fn validate(&self, rows: usize, dim: usize) -> Result<()> {
        let need_seq = self.kind.permutes_rows();
        let need_hidden = self.kind.permutes_hidden();
        match (&self.seq, need_seq) {
            (Some(s), true) if s.len() == rows => {}
            (None, false) => {}
            _ => {
                return Err(Error::Dimension(format!(
                    "{} spec: sequence permutation does not fit {rows} rows",
                    self.kind
                )))
            }
        }
        match (&self.hidden, need_hidden) {
            (Some(h), true) if h.len() == rows && h.iter().all(|p| p.len() == dim) => {}
            (None, false) => {}
            _ => {
                return Err(Error::Dimension(format!(
                    "{} spec: hidden permutations do not fit {rows}x{dim}",
                    self.kind
                )))
            }
        }
        Ok(())
    }

    /// Row `i` of the output is `pi_i(h[sigma(i)])`, with absent parts
    /// taken as identity.
    pub fn apply_matrix(&self, h: &Matrix) -> Result<Matrix> {
        let (rows, dim) = h.shape();
        self.validate(rows, dim)?;
        let mut out = Matrix::zeros(rows, dim);
        for i in 0..rows {
            let src = self.seq.as_ref().map_or(i, |s| s.at(i));
            match &self.hidden {
                Some(pis) => pis[i].apply_into(h.row(src), out.row_mut(i)),
                None => out.row_mut(i).copy_from_slice(h.row(src)),
            }
        }
        Ok(out)
    }

    pub fn invert_matrix(&self, hp: &Matrix) -> Result<Matrix> {
        let (rows, dim) = hp.shape();
        self.validate(rows, dim)?;
        let mut out = Matrix::zeros(rows, dim);
        for i in 0..rows {
            let dst = self.seq.as_ref().map_or(i, |s| s.at(i));
            match &self.hidden {
                Some(pis) => pis[i].inverse().apply_into(hp.row(i), out.row_mut(dst)),
                None => out.row_mut(dst).copy_from_slice(hp.row(i)),
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn apply(spec: &PermutationSpec, h: &HiddenCapture) -> Result<HiddenCapture> {
    if h.perm_tag != PermKind::None {
        return Err(Error::CaptureMismatch(format!(
            "capture already carries a {} permutation",
            h.perm_tag
        )));
    }
    Ok(HiddenCapture {
        matrix: spec.apply_matrix(&h.matrix)?,
        perm_tag: spec.kind,
        ..h.clone()
    })
}

pub fn invert(spec: &PermutationSpec, hp: &HiddenCapture) -> Result<HiddenCapture> {
    if hp.perm_tag != spec.kind {
        return Err(Error::CaptureMismatch(format!(
            "capture tagged {}, spec is {}",
            hp.perm_tag, spec.kind
        )));
    }
    Ok(HiddenCapture {
        matrix: spec.invert_matrix(&hp.matrix)?,
        perm_tag: PermKind::None,
        ..hp.clone()
    })
}
