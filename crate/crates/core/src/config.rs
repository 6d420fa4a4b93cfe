//! TOML game files and the bundled presets.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{GameSpec, Population};
use crate::linalg::{from_rows, to_rows};
use crate::riccati::Policy;

pub const PRESET_NAMES: [&str; 3] = ["example1", "example2", "example3"];

const EXAMPLE1: &str = include_str!("../presets/example1.toml");
const EXAMPLE2: &str = include_str!("../presets/example2.toml");
const EXAMPLE3: &str = include_str!("../presets/example3.toml");

/// Optional experiment defaults carried alongside a game.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_theta: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_theta_bar: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ns: Option<Vec<Population>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GameFile {
    d_x: usize,
    d_u: usize,
    n: Population,
    gamma: f64,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "A_bar")]
    a_bar: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "B_bar")]
    b_bar: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    #[serde(rename = "S_x")]
    s_x: Vec<Vec<f64>>,
    #[serde(rename = "Q_bar")]
    q_bar: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    r: Vec<Vec<f64>>,
    #[serde(rename = "S_u")]
    s_u: Vec<Vec<f64>>,
    #[serde(rename = "R_bar")]
    r_bar: Vec<Vec<f64>>,
    init_mean: Vec<f64>,
    init_cov: Vec<Vec<f64>>,
    noise_cov: Vec<Vec<f64>>,
    #[serde(default)]
    experiment: ExperimentParams,
}

/// A game plus its experiment defaults, as read from a config file or preset.
#[derive(Debug, Clone)]
pub struct GameConfig {
    pub game: GameSpec,
    pub experiment: ExperimentParams,
}

impl GameConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: GameFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let m = |rows: &[Vec<f64>]| from_rows(rows);
        let game = GameSpec {
            d_x: file.d_x,
            d_u: file.d_u,
            n: file.n,
            gamma: file.gamma,
            a: m(&file.a)?,
            a_bar: m(&file.a_bar)?,
            b: m(&file.b)?,
            b_bar: m(&file.b_bar)?,
            q: m(&file.q)?,
            s_x: m(&file.s_x)?,
            q_bar: m(&file.q_bar)?,
            r: m(&file.r)?,
            s_u: m(&file.s_u)?,
            r_bar: m(&file.r_bar)?,
            init_mean: DVector::from_vec(file.init_mean),
            init_cov: m(&file.init_cov)?,
            noise_cov: m(&file.noise_cov)?,
        };
        Ok(GameConfig {
            game,
            experiment: file.experiment,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "example1" => EXAMPLE1,
            "example2" => EXAMPLE2,
            "example3" => EXAMPLE3,
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {name:?} (available: {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        Self::from_toml_str(text)
    }

    pub fn to_toml_string(&self) -> String {
        let g = &self.game;
        let file = GameFile {
            d_x: g.d_x,
            d_u: g.d_u,
            n: g.n,
            gamma: g.gamma,
            a: to_rows(&g.a),
            a_bar: to_rows(&g.a_bar),
            b: to_rows(&g.b),
            b_bar: to_rows(&g.b_bar),
            q: to_rows(&g.q),
            s_x: to_rows(&g.s_x),
            q_bar: to_rows(&g.q_bar),
            r: to_rows(&g.r),
            s_u: to_rows(&g.s_u),
            r_bar: to_rows(&g.r_bar),
            init_mean: g.init_mean.iter().copied().collect(),
            init_cov: to_rows(&g.init_cov),
            noise_cov: to_rows(&g.noise_cov),
            experiment: self.experiment.clone(),
        };
        toml::to_string(&file).expect("game config always serializes")
    }

    /// Initial policy from the experiment table, or zero gains.
    pub fn initial_policy(&self) -> Result<Policy> {
        let (du, dx) = (self.game.d_u, self.game.d_x);
        let read = |rows: &Option<Vec<Vec<f64>>>, name: &str| -> Result<DMatrix<f64>> {
            match rows {
                None => Ok(DMatrix::zeros(du, dx)),
                Some(r) => {
                    let m = from_rows(r)?;
                    if m.shape() != (du, dx) {
                        return Err(Error::Dimension(format!(
                            "{name} is {}x{}, expected {du}x{dx}",
                            m.nrows(),
                            m.ncols()
                        )));
                    }
                    Ok(m)
                }
            }
        };
        Ok(Policy::new(
            read(&self.experiment.init_theta, "init_theta")?,
            read(&self.experiment.init_theta_bar, "init_theta_bar")?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_expand_to_example_parameters() {
        let c = GameConfig::preset("example1").unwrap();
        assert_eq!(c.game.n, Population::Finite(100));
        assert_eq!(c.game.a[(0, 0)], 0.7);
        assert_eq!(c.game.s_x[(0, 0)], 4.0);
        assert_eq!(c.game.noise_cov[(0, 0)], 0.4);
        assert_eq!(c.experiment.eta, Some(0.1));

        let c = GameConfig::preset("example2").unwrap();
        assert_eq!(c.game.q_bar[(0, 0)], 1.0);
        assert_eq!(c.experiment.radius, Some(0.09));
        assert_eq!(c.experiment.samples, Some(1500));
        assert_eq!(c.experiment.horizon, Some(10));

        let c = GameConfig::preset("example3").unwrap();
        assert_eq!(c.game.q_bar[(0, 0)], 4.0);
        assert_eq!(c.experiment.ns.as_ref().unwrap().len(), 5);
        for name in PRESET_NAMES {
            let c = GameConfig::preset(name).unwrap();
            assert_eq!(c.game.gamma, 0.9);
            assert_eq!(c.game.init_mean[0], 1.0);
            c.game.validate().unwrap();
        }
    }

    #[test]
    fn unknown_preset_is_a_config_error() {
        assert!(matches!(GameConfig::preset("example9"), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip() {
        let c = GameConfig::preset("example3").unwrap();
        let back = GameConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back.game, c.game);
        assert_eq!(back.experiment, c.experiment);
    }

    #[test]
    fn infinite_population_parses() {
        let text = EXAMPLE1.replace("\nn = 100\n", "\nn = \"infinite\"\n");
        let c = GameConfig::from_toml_str(&text).unwrap();
        assert_eq!(c.game.n, Population::Infinite);
    }

    #[test]
    fn malformed_file_is_rejected() {
        assert!(GameConfig::from_toml_str("d_x = 1").is_err());
        let text = EXAMPLE1.replace("A = [[0.7]]", "A = [[0.7], [1.0, 2.0]]");
        assert!(GameConfig::from_toml_str(&text).is_err());
    }
}
