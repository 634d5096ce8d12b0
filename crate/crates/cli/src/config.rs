//! Config file schema.
//!
//! ```toml
//! [system]            # every key optional
//! users = 4
//! tx_antennas = 16
//! rx_antennas = [2, 2, 2, 2]
//! streams = [2, 2, 2, 2]
//! blocks = 7
//! block_len = 8
//! power = 1.0
//! weights = [1.0, 1.0, 1.0, 1.0]
//! alphas = [0.9, 0.9, 0.9, 0.9]
//! sigma2_z = 0.1
//! sigma2_bs = 0.1
//! snr_db = [0.0, 10.0, 20.0]
//! seed = 1
//!
//! [profile]
//! band_width = [4, 4, 4, 4]
//! centers = [2, 6, 10, 14]
//! decay_db_per_beam = 1.0
//! lognormal_sigma_db = 2.0
//!
//! [experiment]
//! algorithms = ["alg1", "rzf"]
//! slots = 100
//! mc_samples = 1000
//! mm_iterations = 30
//! mm_rel_tol = 1e-8
//! robust_load = 1.0
//! true_alpha = 0.8
//! assumed_alphas = [0.0, 0.8, 1.0]
//! ```

use std::path::Path;

use robust_precoder::channel::GeneratorProfile;
use robust_precoder::evaluation::{Algorithm, ExperimentOptions};
use robust_precoder::mm::MmOptions;
use robust_precoder::SystemConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    system: Option<RawSystem>,
    profile: Option<RawProfile>,
    experiment: Option<RawExperiment>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    users: Option<usize>,
    tx_antennas: Option<usize>,
    rx_antennas: Option<Vec<usize>>,
    streams: Option<Vec<usize>>,
    blocks: Option<usize>,
    block_len: Option<usize>,
    power: Option<f64>,
    weights: Option<Vec<f64>>,
    alphas: Option<Vec<f64>>,
    sigma2_z: Option<f64>,
    sigma2_bs: Option<f64>,
    snr_db: Option<Vec<f64>>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfile {
    band_width: Option<Vec<usize>>,
    centers: Option<Vec<usize>>,
    decay_db_per_beam: Option<f64>,
    lognormal_sigma_db: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    algorithms: Option<Vec<String>>,
    slots: Option<usize>,
    mc_samples: Option<usize>,
    mm_iterations: Option<usize>,
    mm_rel_tol: Option<f64>,
    robust_load: Option<f64>,
    true_alpha: Option<f64>,
    assumed_alphas: Option<Vec<f64>>,
}

/// Resolved experiment settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub algorithms: Vec<Algorithm>,
    pub slots: usize,
    pub mc_samples: usize,
    pub mm_iterations: usize,
    pub mm_rel_tol: f64,
    pub robust_load: f64,
    pub true_alpha: f64,
    pub assumed_alphas: Vec<f64>,
}

impl ExperimentPlan {
    pub fn options(&self, profile: &GeneratorProfile, trace: bool) -> ExperimentOptions {
        let mut mm = MmOptions {
            iterations: self.mm_iterations,
            rel_tol: self.mm_rel_tol,
            ..MmOptions::default()
        };
        mm.fixed_point.trace = trace;
        ExperimentOptions {
            slots: self.slots,
            mc_samples: self.mc_samples,
            mm,
            robust_load: self.robust_load,
            profile: profile.clone(),
        }
    }
}

/// Fully explicit configuration; every default has been filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub system: SystemConfig,
    pub profile: GeneratorProfile,
    pub experiment: ExperimentPlan,
}

fn per_user<T: Clone>(
    key: &str,
    value: Option<Vec<T>>,
    users: usize,
    default: T,
) -> Result<Vec<T>> {
    match value {
        Some(v) if v.len() != users => Err(CliError::Config(format!(
            "`{key}` has {} entries but there are {users} users",
            v.len()
        ))),
        Some(v) => Ok(v),
        None => Ok(vec![default; users]),
    }
}

fn positive(key: &str, value: usize) -> Result<usize> {
    if value == 0 {
        Err(CliError::Config(format!("`{key}` must be positive")))
    } else {
        Ok(value)
    }
}

pub fn parse_config_str(text: &str) -> Result<ResolvedConfig> {
    let raw: RawFile = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    resolve(raw)
}

pub fn parse_config(path: &Path) -> Result<ResolvedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config_str(&text)
}

fn resolve(raw: RawFile) -> Result<ResolvedConfig> {
    let s = raw.system.unwrap_or_default();
    let users = match (s.users, s.rx_antennas.as_ref()) {
        (Some(u), Some(rx)) if u != rx.len() => {
            return Err(CliError::Config(format!(
                "`users` = {u} disagrees with `rx_antennas` ({} entries)",
                rx.len()
            )))
        }
        (Some(u), _) => u,
        (None, Some(rx)) => rx.len(),
        (None, None) => 4,
    };
    positive("users", users)?;
    let desk = SystemConfig::desk(users);
    let tx = s.tx_antennas.unwrap_or(desk.tx_antennas);
    let rx = s.rx_antennas.unwrap_or(desk.rx_antennas);
    let streams = match s.streams {
        Some(v) => per_user("streams", Some(v), users, 0)?,
        None => rx.clone(),
    };
    let system = SystemConfig {
        tx_antennas: tx,
        block_len: s.block_len.unwrap_or(rx.iter().sum()),
        streams,
        blocks: s.blocks.unwrap_or(desk.blocks),
        power: s.power.unwrap_or(desk.power),
        weights: per_user("weights", s.weights, users, 1.0)?,
        alphas: per_user("alphas", s.alphas, users, desk.alphas[0])?,
        sigma2_z: s.sigma2_z.unwrap_or(desk.sigma2_z),
        sigma2_bs: s.sigma2_bs.unwrap_or(desk.sigma2_bs),
        snr_db: s.snr_db.unwrap_or(desk.snr_db),
        seed: s.seed.unwrap_or(desk.seed),
        rx_antennas: rx,
    };
    system.validate()?;

    let p = raw.profile.unwrap_or_default();
    let default_width = (tx / 4).max(1);
    let profile = GeneratorProfile {
        band_width: per_user("band_width", p.band_width, users, default_width)?,
        centers: match p.centers {
            Some(c) => Some(per_user("centers", Some(c), users, 0)?),
            None => GeneratorProfile::spread(users, tx, default_width).centers,
        },
        decay_db_per_beam: p.decay_db_per_beam.unwrap_or(1.0),
        lognormal_sigma_db: p.lognormal_sigma_db.unwrap_or(2.0),
    };
    if let Some(w) = profile.band_width.iter().find(|&&w| w == 0 || w > tx) {
        return Err(CliError::Config(format!(
            "`band_width` entry {w} must lie in 1..={tx}"
        )));
    }
    if !(profile.lognormal_sigma_db >= 0.0) || !profile.decay_db_per_beam.is_finite() {
        return Err(CliError::Config(
            "`lognormal_sigma_db` must be nonnegative and `decay_db_per_beam` finite".into(),
        ));
    }

    let e = raw.experiment.unwrap_or_default();
    let algorithms = match e.algorithms {
        Some(names) => parse_algorithms(&names)?,
        None => Algorithm::ALL.to_vec(),
    };
    let experiment = ExperimentPlan {
        algorithms,
        slots: positive("slots", e.slots.unwrap_or(100))?,
        mc_samples: positive("mc_samples", e.mc_samples.unwrap_or(1000))?,
        mm_iterations: e.mm_iterations.unwrap_or(30),
        mm_rel_tol: e.mm_rel_tol.unwrap_or(1e-8),
        robust_load: e.robust_load.unwrap_or(1.0),
        true_alpha: e.true_alpha.unwrap_or(0.8),
        assumed_alphas: e
            .assumed_alphas
            .unwrap_or_else(|| vec![0.0, 0.5, 0.8, 0.9, 0.99, 1.0]),
    };
    if !(experiment.mm_rel_tol >= 0.0) {
        return Err(CliError::Config("`mm_rel_tol` must be nonnegative".into()));
    }
    if !(experiment.robust_load >= 0.0) {
        return Err(CliError::Config("`robust_load` must be nonnegative".into()));
    }
    let unit = |a: &f64| (0.0..=1.0).contains(a);
    if !unit(&experiment.true_alpha) {
        return Err(CliError::Config("`true_alpha` must lie in [0, 1]".into()));
    }
    if !experiment.assumed_alphas.iter().all(unit) {
        return Err(CliError::Config(
            "`assumed_alphas` entries must lie in [0, 1]".into(),
        ));
    }
    Ok(ResolvedConfig {
        system,
        profile,
        experiment,
    })
}

/// Parses algorithm names, rejecting unknown and repeated entries.
pub fn parse_algorithms<S: AsRef<str>>(names: &[S]) -> Result<Vec<Algorithm>> {
    let mut out: Vec<Algorithm> = Vec::new();
    for n in names {
        let a: Algorithm = n.as_ref().parse().map_err(|_| {
            CliError::Config(format!("`algorithms`: unknown algorithm `{}`", n.as_ref()))
        })?;
        if out.contains(&a) {
            return Err(CliError::Config(format!(
                "`algorithms`: `{a}` listed twice"
            )));
        }
        out.push(a);
    }
    if out.is_empty() {
        return Err(CliError::Config("`algorithms` must not be empty".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_resolves_to_desk_defaults() {
        let c = parse_config_str("").unwrap();
        assert_eq!(c.system.tx_antennas, 16);
        assert_eq!(c.system.rx_antennas, vec![2; 4]);
        assert_eq!(c.system.streams, vec![2; 4]);
        assert_eq!(c.system.blocks, 7);
        assert_eq!(c.system.power, 1.0);
        assert_eq!(c.system.weights, vec![1.0; 4]);
        assert_eq!(c.experiment.algorithms.len(), 7);
    }

    #[test]
    fn resolved_config_round_trips_through_json() {
        let c = parse_config_str("[system]\nusers = 2\n").unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ResolvedConfig>(&text).unwrap(), c);
    }

    #[test]
    fn errors_name_the_key() {
        let cases = [
            ("[system]\nsigma2_z = -1.0\n", "sigma2_z"),
            ("[system]\nseed = 1\nseed = 2\n", "seed"),
            ("[system]\nbogus = 1\n", "bogus"),
            ("[system]\nusers = 2\nweights = [1.0]\n", "weights"),
            ("[experiment]\nalgorithms = [\"alg9\"]\n", "alg9"),
            ("[system]\ntx_antennas = \"x\"\n", "tx_antennas"),
        ];
        for (text, key) in cases {
            let e = parse_config_str(text).unwrap_err().to_string();
            assert!(e.contains(key), "{e} should mention {key}");
        }
    }

    #[test]
    fn pilot_capacity_is_reported() {
        let e = parse_config_str("[system]\nblock_len = 3\n").unwrap_err();
        assert!(e.to_string().contains("pilot capacity exceeded"));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn duplicate_algorithms_are_rejected() {
        assert!(parse_algorithms(&["alg1", "alg1"]).is_err());
        assert_eq!(
            parse_algorithms(&["rzf", "alg3"]).unwrap(),
            vec![Algorithm::Rzf, Algorithm::BeamDomain]
        );
    }
}
