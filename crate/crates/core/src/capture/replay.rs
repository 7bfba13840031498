use std::collections::BTreeMap;
use std::io::BufRead;

use thiserror::Error;

use crate::model::trace::{TraceError, TraceReader};
use crate::model::{Element, Lane, OrderValidator, OrderingViolation};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Parse(#[from] TraceError),
    #[error(transparent)]
    Ordering(#[from] OrderingViolation),
}

/// Validating reader: yields elements in file order and stops at the first
/// parse error or ordering violation.
pub struct Replay<R: BufRead> {
    reader: TraceReader<R>,
    validator: OrderValidator,
    failed: bool,
}

pub fn replay<R: BufRead>(input: R) -> Replay<R> {
    Replay {
        reader: TraceReader::new(input),
        validator: OrderValidator::new(),
        failed: false,
    }
}

impl<R: BufRead> Iterator for Replay<R> {
    type Item = Result<Element, ReplayError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let item = match self.reader.next()? {
            Ok(el) => self.validator.check(&el).map(|()| el).map_err(ReplayError::from),
            Err(e) => Err(e.into()),
        };
        self.failed = item.is_err();
        Some(item)
    }
}

/// Replays a whole trace and splits it into per-lane streams.
pub fn replay_by_lane<R: BufRead>(input: R) -> Result<BTreeMap<Lane, Vec<Element>>, ReplayError> {
    let mut lanes: BTreeMap<Lane, Vec<Element>> = BTreeMap::new();
    for el in replay(input) {
        let el = el?;
        lanes.entry(el.lane()).or_default().push(el);
    }
    Ok(lanes)
}
