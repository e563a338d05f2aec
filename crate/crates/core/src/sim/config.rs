use thiserror::Error;

/// Comparators available for trace filtering.
pub const COMPARATOR_BUDGET: usize = 4;
/// Comparators consumed by each filter.
pub const COMPARATORS_PER_FILTER: usize = 2;

/// DWT-style trace filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Filter {
    /// Trace only while the pc is in `[start, end)`.
    AddressRange { start: u32, end: u32 },
    /// Executing `start` turns tracing on, executing `stop` turns it off.
    InstrTrigger { start: u32, stop: u32 },
    /// Storing `value` to `watch` turns tracing on; storing anything else there
    /// turns it off.
    DataTrigger { watch: u32, value: u32 },
}

impl Filter {
    pub fn comparators(&self) -> usize {
        COMPARATORS_PER_FILTER
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("filters need {needed} comparators, only {COMPARATOR_BUDGET} available")]
    ComparatorBudget { needed: usize },
    #[error("address range 0x{start:08X}..0x{end:08X} is empty")]
    EmptyRange { start: u32, end: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceConfig {
    /// Emit branch packets for taken direct branches (ETMCR bit 8).
    pub direct_branch_packets: bool,
    pub filters: Vec<Filter>,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            direct_branch_packets: true,
            filters: Vec::new(),
        }
    }
}

impl TraceConfig {
    pub fn with_filters(filters: Vec<Filter>) -> Self {
        Self {
            direct_branch_packets: true,
            filters,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let needed: usize = self.filters.iter().map(Filter::comparators).sum();
        if needed > COMPARATOR_BUDGET {
            return Err(ConfigError::ComparatorBudget { needed });
        }
        for f in &self.filters {
            if let Filter::AddressRange { start, end } = *f {
                if start >= end {
                    return Err(ConfigError::EmptyRange { start, end });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comparator_budget() {
        let f = Filter::DataTrigger { watch: 0, value: 0 };
        assert!(TraceConfig::with_filters(vec![f; 2]).validate().is_ok());
        assert_eq!(
            TraceConfig::with_filters(vec![f; 3]).validate(),
            Err(ConfigError::ComparatorBudget { needed: 6 })
        );
    }

    #[test]
    fn empty_range() {
        let cfg = TraceConfig::with_filters(vec![Filter::AddressRange { start: 8, end: 8 }]);
        assert!(matches!(cfg.validate(), Err(ConfigError::EmptyRange { .. })));
    }
}
