//! System dimensions, power budget and noise levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Static description of one downlink system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Transmit antennas at the base station (`M_t`).
    pub tx_antennas: usize,
    /// Receive antennas per user (`M_k`); its length is the user count.
    pub rx_antennas: Vec<usize>,
    /// Data streams per user (`d_k`).
    pub streams: Vec<usize>,
    /// Blocks per slot (`N_b`); block 1 carries the uplink pilots.
    pub blocks: usize,
    /// Symbols per block (`T`), also the pilot length.
    pub block_len: usize,
    /// Sum transmit power budget.
    pub power: f64,
    pub weights: Vec<f64>,
    /// Per-user Gauss-Markov coefficient.
    pub alphas: Vec<f64>,
    /// Downlink noise variance.
    pub sigma2_z: f64,
    /// Uplink (pilot) noise variance.
    pub sigma2_bs: f64,
    pub snr_db: Vec<f64>,
    pub seed: u64,
}

impl SystemConfig {
    /// Small desk defaults: 16 antennas, 4 users with 2 antennas and
    /// 2 streams each, 7 blocks, unit power and weights, SNR 10 dB.
    pub fn desk(users: usize) -> Self {
        let rx = vec![2; users];
        let total: usize = rx.iter().sum();
        SystemConfig {
            tx_antennas: 16,
            streams: rx.clone(),
            rx_antennas: rx,
            blocks: 7,
            block_len: total,
            power: 1.0,
            weights: vec![1.0; users],
            alphas: vec![0.9; users],
            sigma2_z: 0.1,
            sigma2_bs: 0.1,
            snr_db: vec![0.0, 10.0, 20.0],
            seed: 1,
        }
    }

    pub fn users(&self) -> usize {
        self.rx_antennas.len()
    }

    pub fn total_rx(&self) -> usize {
        self.rx_antennas.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.users();
        if k == 0 {
            return Err(Error::InvalidConfig("at least one user is required".into()));
        }
        if self.tx_antennas == 0 {
            return Err(Error::InvalidConfig("tx_antennas must be positive".into()));
        }
        for (name, len) in [
            ("streams", self.streams.len()),
            ("weights", self.weights.len()),
            ("alphas", self.alphas.len()),
        ] {
            if len != k {
                return Err(Error::InvalidConfig(format!(
                    "{name} has {len} entries but there are {k} users"
                )));
            }
        }
        for (i, (&m, &d)) in self.rx_antennas.iter().zip(&self.streams).enumerate() {
            if m == 0 {
                return Err(Error::InvalidConfig(format!(
                    "rx_antennas[{i}] must be positive"
                )));
            }
            if d == 0 || d > m.min(self.tx_antennas) {
                return Err(Error::InvalidConfig(format!(
                    "streams[{i}] = {d} must lie in 1..=min(M_k, M_t) = {}",
                    m.min(self.tx_antennas)
                )));
            }
        }
        if self.blocks == 0 {
            return Err(Error::InvalidConfig("blocks must be at least 1".into()));
        }
        if self.total_rx() > self.block_len {
            return Err(Error::PilotCapacity {
                needed: self.total_rx(),
                available: self.block_len,
            });
        }
        if !(self.power > 0.0) || !self.power.is_finite() {
            return Err(Error::InvalidConfig("power must be positive".into()));
        }
        if let Some(i) = self
            .weights
            .iter()
            .position(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(Error::InvalidConfig(format!(
                "weights[{i}] must be nonnegative"
            )));
        }
        if let Some(i) = self.alphas.iter().position(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidConfig(format!(
                "alphas[{i}] must lie in [0, 1]"
            )));
        }
        if !(self.sigma2_z > 0.0) || !self.sigma2_z.is_finite() {
            return Err(Error::InvalidConfig("sigma2_z must be positive".into()));
        }
        if !(self.sigma2_bs >= 0.0) || !self.sigma2_bs.is_finite() {
            return Err(Error::InvalidConfig("sigma2_bs must be nonnegative".into()));
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidConfig("snr_db entries must be finite".into()));
        }
        Ok(())
    }
}

/// Downlink noise variance for an SNR in dB (`SNR = 1/σ_z²`).
pub fn noise_from_snr_db(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// The per-design inputs the precoder algorithms need.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignParams {
    pub weights: Vec<f64>,
    pub sigma2_z: f64,
    pub power: f64,
}

impl DesignParams {
    pub fn new(weights: Vec<f64>, sigma2_z: f64, power: f64) -> Self {
        DesignParams {
            weights,
            sigma2_z,
            power,
        }
    }

    pub fn from_config(cfg: &SystemConfig, sigma2_z: f64) -> Self {
        Self::new(cfg.weights.clone(), sigma2_z, cfg.power)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_validate() {
        SystemConfig::desk(4).validate().unwrap();
    }

    #[test]
    fn pilot_capacity_is_enforced() {
        let mut cfg = SystemConfig::desk(4);
        cfg.block_len = 7;
        assert!(matches!(
            cfg.validate(),
            Err(Error::PilotCapacity {
                needed: 8,
                available: 7
            })
        ));
    }

    #[test]
    fn rejects_bad_fields() {
        let mut cfg = SystemConfig::desk(2);
        cfg.sigma2_z = -1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = SystemConfig::desk(2);
        cfg.streams[0] = 3;
        assert!(cfg.validate().is_err());

        let mut cfg = SystemConfig::desk(2);
        cfg.weights[1] = -0.5;
        assert!(cfg.validate().is_err());

        let mut cfg = SystemConfig::desk(2);
        cfg.power = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn snr_mapping() {
        assert!((noise_from_snr_db(10.0) - 0.1).abs() < 1e-15);
        assert_eq!(noise_from_snr_db(0.0), 1.0);
    }
}
