use crate::model::{QueryId, QueryScratch, ValueHandle};

use super::{Mode, QueryError};

/// Contiguous range of label bits owned by one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelGrant {
    first: u8,
    count: u8,
}

impl LabelGrant {
    pub(crate) fn new(first: u8, count: u8) -> Self {
        LabelGrant { first, count }
    }

    pub fn first(&self) -> u8 {
        self.first
    }

    pub fn count(&self) -> u8 {
        self.count
    }

    /// Absolute bit number of the query's `i`-th label.
    pub fn bit(&self, i: u8) -> u8 {
        assert!(i < self.count, "label index {i} outside a grant of {}", self.count);
        self.first + i
    }

    pub fn contains(&self, bit: u8) -> bool {
        bit >= self.first && bit - self.first < self.count
    }

    pub fn mask(&self) -> u64 {
        if self.count == 0 {
            0
        } else {
            (u64::MAX >> (64 - self.count as u32)) << self.first
        }
    }
}

/// Handed to every callback: identifies the calling query and mediates its
/// access to element scratch.
#[derive(Debug, Clone)]
pub struct QueryCtx {
    id: QueryId,
    name: String,
    grant: LabelGrant,
    mode: Mode,
}

impl QueryCtx {
    pub fn new(id: QueryId, name: String, grant: LabelGrant, mode: Mode) -> Self {
        QueryCtx { id, name, grant, mode }
    }

    pub fn id(&self) -> QueryId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn grant(&self) -> LabelGrant {
        self.grant
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn check(&self, bit: u8) -> Result<u64, QueryError> {
        if self.grant.contains(bit) {
            Ok(1u64 << bit)
        } else {
            Err(QueryError::ForeignBit {
                query: self.name.clone(),
                bit,
            })
        }
    }

    pub fn add_label(&self, s: &mut QueryScratch, bit: u8) -> Result<(), QueryError> {
        let m = self.check(bit)?;
        s.set_labels(s.labels() | m);
        Ok(())
    }

    pub fn has_label(&self, s: &QueryScratch, bit: u8) -> Result<bool, QueryError> {
        Ok(s.labels() & self.check(bit)? != 0)
    }

    pub fn clear_label(&self, s: &mut QueryScratch, bit: u8) -> Result<(), QueryError> {
        let m = self.check(bit)?;
        s.set_labels(s.labels() & !m);
        Ok(())
    }

    /// The calling query's labels on `s`, shifted down to bit 0.
    pub fn labels(&self, s: &QueryScratch) -> u64 {
        (s.labels() & self.grant.mask()) >> self.grant.first
    }

    /// Attaches a handle to `s`, returning the one it replaces.
    pub fn set_value(&self, s: &mut QueryScratch, handle: ValueHandle) -> Option<ValueHandle> {
        s.set_value(self.id, handle)
    }

    pub fn value(&self, s: &QueryScratch) -> Option<ValueHandle> {
        s.value_for(self.id)
    }

    pub fn take_value(&self, s: &mut QueryScratch) -> Option<ValueHandle> {
        s.take_value(self.id)
    }
}
