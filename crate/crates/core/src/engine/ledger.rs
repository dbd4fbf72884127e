//! KV-cache accounting in token units.

/// Per-request alive token counts plus the aggregate, with a change log
/// for timeline reconstruction. Totals may exceed capacity only
/// transiently within the step that triggers eviction; the engine evicts
/// at the next return it processes.
#[derive(Debug)]
pub(crate) struct KvLedger {
    per_req: Vec<u64>,
    pub total: u64,
    pub capacity: u64,
    /// (time, total) at every instant the total changed.
    pub points: Vec<(u64, u64)>,
    pub peak: u64,
}

impl KvLedger {
    pub fn new(num_requests: usize, capacity: u64) -> Self {
        KvLedger {
            per_req: vec![0; num_requests],
            total: 0,
            capacity,
            points: vec![(0, 0)],
            peak: 0,
        }
    }

    pub fn tokens_of(&self, req: usize) -> u64 {
        self.per_req[req]
    }

    pub fn add(&mut self, req: usize, tokens: u64) {
        self.per_req[req] += tokens;
        self.total += tokens;
        self.peak = self.peak.max(self.total);
    }

    /// Free a request's entire footprint; returns the freed token count.
    pub fn release(&mut self, req: usize) -> u64 {
        let freed = std::mem::take(&mut self.per_req[req]);
        self.total -= freed;
        freed
    }

    /// Log the current total at `t`. Call once per simulated instant after
    /// all mutations at that instant.
    pub fn record(&mut self, t: u64) {
        if let Some(last) = self.points.last() {
            if last.0 == t {
                let idx = self.points.len() - 1;
                self.points[idx].1 = self.total;
                return;
            }
        }
        self.points.push((t, self.total));
    }
}
