//! Gas accounting for the simulated layer-1.

use serde::{Deserialize, Serialize};

use crate::vm::program::CostTable;
use crate::vm::MAX_OP_COST;

pub const DEFAULT_GAS_PER_FLOP: u64 = 3;
pub const DEFAULT_BLOCK_GAS_LIMIT: u64 = 30_000_000;
pub const DEFAULT_PROOF_UNIT_COST: u64 = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GasModel {
    pub gas_per_flop: u64,
    pub block_gas_limit: u64,
    /// Gas per hash evaluated while checking a Merkle proof.
    pub proof_unit_cost: u64,
    /// Costs the linearizer stamps on each micro-op kind. Fixed, since they
    /// are part of every program commitment.
    #[serde(skip)]
    pub op_costs: CostTable,
}

impl Default for GasModel {
    fn default() -> Self {
        GasModel {
            gas_per_flop: DEFAULT_GAS_PER_FLOP,
            block_gas_limit: DEFAULT_BLOCK_GAS_LIMIT,
            proof_unit_cost: DEFAULT_PROOF_UNIT_COST,
            op_costs: CostTable::DEFAULT,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GasError {
    #[error("flop count must be positive")]
    ZeroFlops,
    #[error("gas estimate overflows u64")]
    Overflow,
    #[error("gas model has a zero cost or limit")]
    NonPositive,
}

/// Gas needed to run a computation directly on the layer-1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GasEstimate {
    pub flops: u64,
    pub gas: u64,
    pub block_gas_limit: u64,
}

impl GasEstimate {
    /// `gas / block_gas_limit` as a float.
    pub fn blocks(&self) -> f64 {
        self.gas as f64 / self.block_gas_limit as f64
    }

    /// Exact ratio when the gas is a whole number of blocks.
    pub fn whole_blocks(&self) -> Option<u64> {
        self.gas
            .is_multiple_of(self.block_gas_limit)
            .then(|| self.gas / self.block_gas_limit)
    }

    pub fn fits_in_block(&self) -> bool {
        self.gas <= self.block_gas_limit
    }
}

impl GasModel {
    pub fn validate(&self) -> Result<(), GasError> {
        let t = &self.op_costs;
        let costs = [t.dot, t.map, t.sigmoid, t.reduce, t.argmax];
        if self.gas_per_flop == 0
            || self.block_gas_limit == 0
            || self.proof_unit_cost == 0
            || costs.iter().any(|c| c.base == 0 || c.per_element == 0)
        {
            return Err(GasError::NonPositive);
        }
        Ok(())
    }

    pub fn estimate_gas(&self, flops: u64) -> Result<GasEstimate, GasError> {
        if flops == 0 {
            return Err(GasError::ZeroFlops);
        }
        let gas = flops
            .checked_mul(self.gas_per_flop)
            .ok_or(GasError::Overflow)?;
        Ok(GasEstimate {
            flops,
            gas,
            block_gas_limit: self.block_gas_limit,
        })
    }

    pub fn proof_cost(&self, hashes: usize) -> u64 {
        hashes as u64 * self.proof_unit_cost
    }

    /// Worst-case gas of one one-step verification: the micro-op itself, the
    /// op-membership proof and up to three slot proofs.
    pub fn one_step_bound(&self, ops_height: u32, memory_height: u32) -> u64 {
        MAX_OP_COST + self.proof_cost(ops_height as usize + 3 * memory_height as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg_scale_estimate() {
        let e = GasModel::default().estimate_gas(30_000_000_000).unwrap();
        assert_eq!(e.gas, 90_000_000_000);
        assert_eq!(e.whole_blocks(), Some(3000));
    }

    #[test]
    fn block_boundary() {
        let e = GasModel::default().estimate_gas(10_000_000).unwrap();
        assert_eq!(e.gas, 30_000_000);
        assert_eq!(e.whole_blocks(), Some(1));
        assert!(e.fits_in_block());
    }

    #[test]
    fn zero_flops_rejected() {
        assert_eq!(
            GasModel::default().estimate_gas(0),
            Err(GasError::ZeroFlops)
        );
        assert_eq!(
            GasModel::default().estimate_gas(u64::MAX),
            Err(GasError::Overflow)
        );
    }
}
