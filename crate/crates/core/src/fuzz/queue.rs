use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A queued input and how it was found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Testcase {
    pub id: u64,
    pub parent: Option<u64>,
    pub data: Vec<u8>,
    /// Campaign execution count at discovery (0 for seeds).
    pub found_at: u64,
    pub depth: u32,
    /// Instructions retired when run, used as the speed measure.
    pub executed: u64,
}

#[derive(Debug, Clone)]
pub(crate) struct QueueEntry {
    pub testcase: Testcase,
    pub edges: Vec<u32>,
    pub favored: bool,
    pub fuzzed: bool,
    pub det_cursor: usize,
    pub det_done: bool,
}

impl QueueEntry {
    fn score(&self) -> u64 {
        (self.testcase.data.len().max(1) as u64).saturating_mul(self.testcase.executed.max(1))
    }
}

/// Queue with AFL-style favoring: for every covered bitmap index the
/// smallest, fastest entry (`len × instructions`) is kept as top-rated, and
/// the favored set is a greedy cover of all indices by top-rated entries.
#[derive(Debug, Clone)]
pub(crate) struct Queue {
    pub entries: Vec<QueueEntry>,
    top_rated: Vec<Option<usize>>,
    dirty: bool,
    cursor: usize,
}

impl Queue {
    pub fn new(map_len: usize) -> Self {
        Self {
            entries: Vec::new(),
            top_rated: vec![None; map_len],
            dirty: false,
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn push(&mut self, testcase: Testcase, local: &[u8]) {
        let index = self.entries.len();
        let edges: Vec<u32> = local
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0)
            .map(|(i, _)| i as u32)
            .collect();
        let entry = QueueEntry {
            testcase,
            edges,
            favored: false,
            fuzzed: false,
            det_cursor: 0,
            det_done: false,
        };
        let score = entry.score();
        for &e in &entry.edges {
            let slot = &mut self.top_rated[e as usize];
            if slot.is_none_or(|best| score < self.entries[best].score()) {
                *slot = Some(index);
                self.dirty = true;
            }
        }
        self.entries.push(entry);
    }

    fn cull(&mut self) {
        if !self.dirty {
            return;
        }
        self.dirty = false;
        let mut covered = vec![false; self.top_rated.len()];
        for e in &mut self.entries {
            e.favored = false;
        }
        for i in 0..self.top_rated.len() {
            if covered[i] {
                continue;
            }
            if let Some(best) = self.top_rated[i] {
                self.entries[best].favored = true;
                for &e in &self.entries[best].edges {
                    covered[e as usize] = true;
                }
            }
        }
    }

    /// Picks the next entry to fuzz. Non-favored entries are mostly skipped,
    /// more aggressively while favored entries remain unfuzzed.
    pub fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        self.cull();
        let pending_favored = self.entries.iter().any(|e| e.favored && !e.fuzzed);
        loop {
            let i = self.cursor % self.entries.len();
            self.cursor = i + 1;
            let e = &self.entries[i];
            let skip_pct = match (e.favored, pending_favored, e.fuzzed) {
                (true, _, _) => 0,
                (false, true, _) => 99,
                (false, false, true) => 95,
                (false, false, false) => 75,
            };
            if skip_pct == 0 || rng.gen_range(0..100) >= skip_pct {
                return i;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tc(id: u64, len: usize, executed: u64) -> Testcase {
        Testcase {
            id,
            parent: None,
            data: vec![0; len],
            found_at: 0,
            depth: 0,
            executed,
        }
    }

    #[test]
    fn favored_is_greedy_cover_of_cheapest() {
        let mut q = Queue::new(8);
        q.push(tc(0, 10, 10), &[1, 1, 0, 0, 0, 0, 0, 0]);
        q.push(tc(1, 1, 10), &[1, 0, 0, 0, 0, 0, 0, 0]);
        q.push(tc(2, 1, 10), &[0, 0, 1, 0, 0, 0, 0, 0]);
        q.cull();
        let favored: Vec<bool> = q.entries.iter().map(|e| e.favored).collect();
        assert_eq!(favored, vec![true, true, true]);
        q.push(tc(3, 1, 1), &[0, 1, 1, 0, 0, 0, 0, 0]);
        q.cull();
        let favored: Vec<bool> = q.entries.iter().map(|e| e.favored).collect();
        assert_eq!(favored, vec![false, true, false, true]);
    }

    #[test]
    fn next_cycles_through_favored() {
        let mut q = Queue::new(4);
        q.push(tc(0, 1, 1), &[1, 0, 0, 0]);
        q.push(tc(1, 1, 1), &[0, 1, 0, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let picks: Vec<usize> = (0..4).map(|_| q.next(&mut rng)).collect();
        assert_eq!(picks, vec![0, 1, 0, 1]);
    }
}
