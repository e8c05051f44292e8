use crate::error::{Error, Result};

/// Build-time parameters of the multi-view index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexConfig {
    /// First-level cluster count.
    pub n_cluster: usize,
    /// PQ sub-dimensions; must divide the vector dimension.
    pub m: usize,
    /// Codewords per sub-codebook, at most 256.
    pub l: usize,
    /// Routing-graph out-degree.
    pub out_d: usize,
    /// Candidate queue bound used while inserting routing nodes.
    pub ef_construction: usize,
    /// Upper bound on Lloyd iterations for both clustering levels.
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            n_cluster: 1024,
            m: 8,
            l: 256,
            out_d: 10,
            ef_construction: 200,
            kmeans_iters: 25,
            seed: 42,
        }
    }
}

impl IndexConfig {
    /// Checks the configuration against a dataset of `n` vectors of dimension `d`.
    pub fn validate(&self, n: usize, d: usize) -> Result<()> {
        if self.n_cluster == 0 || self.n_cluster > n {
            return Err(Error::arg(format!("n_cluster={} must be in 1..={n}", self.n_cluster)));
        }
        if self.m == 0 || !d.is_multiple_of(self.m) {
            return Err(Error::arg(format!("m={} must divide d={d}", self.m)));
        }
        if self.l == 0 || self.l > 256 || self.l > n {
            return Err(Error::arg(format!("l={} must be in 1..=min(256, n={n})", self.l)));
        }
        if self.out_d < 2 {
            return Err(Error::arg(format!("out_d={} must be at least 2", self.out_d)));
        }
        if self.ef_construction == 0 {
            return Err(Error::arg("ef_construction must be positive"));
        }
        Ok(())
    }
}

/// Per-query search parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SearchParams {
    /// Neighbors returned.
    pub k: usize,
    /// Candidate-list size handed to the full-view rerank.
    pub r: usize,
    /// Clusters scanned.
    pub nscan: usize,
    /// Ground-layer routing queue bound.
    pub ef_search: usize,
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.r {
            return Err(Error::arg(format!("need 1 <= k ({}) <= r ({})", self.k, self.r)));
        }
        if self.nscan == 0 || self.ef_search < self.nscan {
            return Err(Error::arg(format!(
                "need 1 <= nscan ({}) <= ef_search ({})",
                self.nscan, self.ef_search
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let c = IndexConfig { n_cluster: 10, m: 4, l: 16, ..Default::default() };
        assert!(c.validate(100, 32).is_ok());
        assert!(c.validate(100, 30).is_err());
        assert!(c.validate(5, 32).is_err());
        assert!(IndexConfig { l: 257, ..c }.validate(1000, 32).is_err());
        assert!(IndexConfig { out_d: 1, ..c }.validate(100, 32).is_err());
    }

    #[test]
    fn params_validation() {
        let p = SearchParams { k: 10, r: 10, nscan: 4, ef_search: 4 };
        assert!(p.validate().is_ok());
        assert!(SearchParams { k: 11, ..p }.validate().is_err());
        assert!(SearchParams { ef_search: 3, ..p }.validate().is_err());
        assert!(SearchParams { nscan: 0, ..p }.validate().is_err());
    }
}
