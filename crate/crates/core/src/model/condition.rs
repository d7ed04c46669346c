use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Id of the unconditioned ("no prompt") token. Always present.
pub const NULL_TOKEN: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub enum TokenKind {
    Null,
    Class(usize),
    /// A rare-token identifier appended after pretraining. `base_class` is the
    /// class whose embedding seeded it.
    Trigger {
        name: String,
        base_class: usize,
    },
}

/// Token-embedding table standing in for a text encoder.
///
/// Layout: id 0 is the null token, ids `1..=n_classes` are base classes, and
/// triggers are appended after them. Registering a trigger never touches
/// existing rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionTable {
    dim: usize,
    embeddings: Vec<Vec<f64>>,
    kinds: Vec<TokenKind>,
}

impl ConditionTable {
    pub fn new(dim: usize, n_classes: usize, rng: &mut Rng) -> Self {
        let mut kinds = vec![TokenKind::Null];
        kinds.extend((0..n_classes).map(TokenKind::Class));
        let embeddings = kinds.iter().map(|_| rng::normal_vec(rng, dim)).collect();
        ConditionTable { dim, embeddings, kinds }
    }

    pub(crate) fn from_parts(dim: usize, embeddings: Vec<Vec<f64>>, kinds: Vec<TokenKind>) -> Result<Self> {
        if embeddings.len() != kinds.len() || embeddings.iter().any(|e| e.len() != dim) {
            return Err(Error::Format("condition table rows do not match their kinds".into()));
        }
        if kinds.first() != Some(&TokenKind::Null) {
            return Err(Error::Format("condition table must start with the null token".into()));
        }
        Ok(ConditionTable { dim, embeddings, kinds })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.kinds.iter().filter(|k| matches!(k, TokenKind::Class(_))).count()
    }

    pub fn class_token(&self, class: usize) -> Result<usize> {
        let id = class + 1;
        match self.kinds.get(id) {
            Some(TokenKind::Class(c)) if *c == class => Ok(id),
            _ => Err(Error::UnknownToken(id)),
        }
    }

    pub fn kind(&self, id: usize) -> Result<&TokenKind> {
        self.kinds.get(id).ok_or(Error::UnknownToken(id))
    }

    pub fn kinds(&self) -> &[TokenKind] {
        &self.kinds
    }

    pub fn trigger_ids(&self) -> Vec<usize> {
        (0..self.kinds.len()).filter(|&i| matches!(self.kinds[i], TokenKind::Trigger { .. })).collect()
    }

    pub fn trigger_by_name(&self, name: &str) -> Option<usize> {
        self.kinds.iter().position(|k| matches!(k, TokenKind::Trigger { name: n, .. } if n == name))
    }

    pub fn embed(&self, id: usize) -> Result<&[f64]> {
        self.embeddings.get(id).map(|e| e.as_slice()).ok_or(Error::UnknownToken(id))
    }

    pub fn set_embedding(&mut self, id: usize, value: &[f64]) -> Result<()> {
        if value.len() != self.dim {
            return Err(Error::invalid(format!("embedding of length {} for dim {}", value.len(), self.dim)));
        }
        let row = self.embeddings.get_mut(id).ok_or(Error::UnknownToken(id))?;
        row.copy_from_slice(value);
        Ok(())
    }

    /// Appends a trigger token initialized as a copy of `base_class`'s
    /// embedding plus Gaussian noise of standard deviation `noise_std`.
    pub fn register_trigger(&mut self, name: &str, base_class: usize, noise_std: f64, rng: &mut Rng) -> Result<usize> {
        if self.trigger_by_name(name).is_some() {
            return Err(Error::invalid(format!("trigger token '{name}' already registered")));
        }
        let src = self.embed(self.class_token(base_class)?)?.to_vec();
        let noise = rng::normal_vec(rng, self.dim);
        let row = src.iter().zip(noise).map(|(s, n)| s + noise_std * n).collect();
        self.embeddings.push(row);
        self.kinds.push(TokenKind::Trigger { name: name.to_string(), base_class });
        Ok(self.embeddings.len() - 1)
    }

    /// All rows as a `[len, dim]` tensor.
    pub fn as_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.embeddings.concat())
    }

    /// Rows `range` as a `[len, dim]` tensor.
    pub(crate) fn rows_tensor(&self, range: std::ops::Range<usize>) -> Tensor {
        let rows = &self.embeddings[range];
        Tensor::matrix(rows.len(), self.dim, rows.concat())
    }

    pub(crate) fn set_rows(&mut self, start: usize, rows: &Tensor) {
        for (i, row) in rows.data().chunks(self.dim).enumerate() {
            self.embeddings[start + i].copy_from_slice(row);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.embeddings.iter().flatten().all(|v| v.is_finite())
    }
}
