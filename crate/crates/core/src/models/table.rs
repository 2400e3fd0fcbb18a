use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::prob::{Distribution, TokenId};

/// Explicit next-token table keyed by context suffix.
///
/// Lookup uses the longest stored suffix of the context; contexts with no
/// matching suffix get the default row.
#[derive(Debug, Clone, PartialEq)]
pub struct TableModel {
    default: Distribution,
    rows: HashMap<Box<[TokenId]>, Distribution>,
    max_key_len: usize,
}

impl TableModel {
    pub fn new(default: Distribution) -> Self {
        Self {
            default,
            rows: HashMap::new(),
            max_key_len: 0,
        }
    }

    pub fn with_row(mut self, suffix: &[TokenId], dist: Distribution) -> Result<Self, ModelError> {
        self.insert(suffix, dist)?;
        Ok(self)
    }

    pub fn insert(&mut self, suffix: &[TokenId], dist: Distribution) -> Result<(), ModelError> {
        let v = self.vocab_size();
        if dist.len() != v {
            return Err(ModelError::InvalidSpec(format!(
                "row over {} tokens in a table over {v}",
                dist.len()
            )));
        }
        if let Some(bad) = suffix.iter().find(|t| t.index() >= v) {
            return Err(ModelError::TokenOutOfRange {
                token: *bad,
                vocab_size: v,
            });
        }
        self.max_key_len = self.max_key_len.max(suffix.len());
        self.rows.insert(suffix.into(), dist);
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.default.len()
    }

    pub fn dist(&self, ctx: &[TokenId]) -> Distribution {
        let longest = ctx.len().min(self.max_key_len);
        for len in (1..=longest).rev() {
            if let Some(d) = self.rows.get(&ctx[ctx.len() - len..]) {
                return d.clone();
            }
        }
        self.rows.get(&[][..]).unwrap_or(&self.default).clone()
    }

    pub(crate) fn to_dump(&self) -> TableDump {
        let mut rows: Vec<TableRow> = self
            .rows
            .iter()
            .map(|(k, d)| TableRow {
                context: k.iter().map(|t| t.0).collect(),
                dist: d.clone(),
            })
            .collect();
        rows.sort_unstable_by(|a, b| a.context.cmp(&b.context));
        TableDump {
            default: self.default.clone(),
            rows,
        }
    }

    pub(crate) fn from_dump(dump: TableDump) -> Result<Self, ModelError> {
        let mut model = TableModel::new(dump.default);
        for row in dump.rows {
            let ctx: Vec<TokenId> = row.context.into_iter().map(TokenId).collect();
            model.insert(&ctx, row.dist)?;
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct TableRow {
    pub context: Vec<u32>,
    pub dist: Distribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct TableDump {
    pub default: Distribution,
    pub rows: Vec<TableRow>,
}
