//! Time-limited item leases. Each item has at most one holder and each
//! reviewer holds at most one item; taking a new lease drops the old one.

use std::collections::HashMap;
use std::time::{Duration, Instant};

#[derive(Debug, Clone)]
struct Lease {
    reviewer: String,
    expires: Instant,
}

#[derive(Debug)]
pub struct LeaseTable {
    ttl: Duration,
    by_item: HashMap<String, Lease>,
}

impl LeaseTable {
    pub fn new(ttl: Duration) -> Self {
        LeaseTable {
            ttl,
            by_item: HashMap::new(),
        }
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    /// Active holder of `item`, if any.
    pub fn holder(&self, item: &str, now: Instant) -> Option<&str> {
        self.by_item
            .get(item)
            .filter(|l| l.expires > now)
            .map(|l| l.reviewer.as_str())
    }

    /// The item `reviewer` currently holds.
    pub fn held_by(&self, reviewer: &str, now: Instant) -> Option<&str> {
        self.by_item
            .iter()
            .find(|(_, l)| l.reviewer == reviewer && l.expires > now)
            .map(|(id, _)| id.as_str())
    }

    /// Grants or renews a lease. Fails with the current holder when another
    /// reviewer has it.
    pub fn acquire(&mut self, item: &str, reviewer: &str, now: Instant) -> Result<Instant, String> {
        if let Some(other) = self.holder(item, now).filter(|h| *h != reviewer) {
            return Err(other.to_string());
        }
        self.by_item
            .retain(|id, l| l.expires > now && !(l.reviewer == reviewer && id != item));
        let expires = now + self.ttl;
        self.by_item.insert(
            item.to_string(),
            Lease {
                reviewer: reviewer.to_string(),
                expires,
            },
        );
        Ok(expires)
    }

    pub fn release(&mut self, item: &str) {
        self.by_item.remove(item);
    }

    pub fn active(&self, now: Instant) -> usize {
        self.by_item.values().filter(|l| l.expires > now).count()
    }
}
