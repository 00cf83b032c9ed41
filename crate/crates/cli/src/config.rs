//! Scenario configuration: one TOML file per run.
//!
//! Every run is fully determined by the config plus the code version;
//! seeds are mandatory fields with fixed defaults, never wall-clock
//! derived. The canonical serialization of the parsed config is hashed
//! and embedded in every artifact.

use mvsde::constants::{build_bundle, fit_envelopes_exact, BundleInputs, ConstantsBundle};
use mvsde::diffusion::DiffusionSpec;
use mvsde::error::{Error, Result};
use mvsde::kernels::KernelSpec;
use mvsde::meanfield::VorticitySpec;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: String,
    pub seed: u64,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub vorticity: VorticityConfig,
    #[serde(default)]
    pub constants: ConstantsConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub girsanov: GirsanovConfig,
    #[serde(default)]
    pub density: DensityConfig,
    #[serde(default)]
    pub nvortex: NvortexConfig,
    #[serde(default)]
    pub chaos: ChaosConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    /// identity | scaled-identity | diag-const | diag-sin
    pub sigma: String,
    pub dim: usize,
    pub scale: f64,
    pub entries: Vec<f64>,
    pub amplitude: f64,
    /// 0 uses the family's own ellipticity constant; a positive value
    /// widens it (never tightens)
    #[serde(default)]
    pub xi: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            sigma: "identity".into(),
            dim: 2,
            scale: 1.0,
            entries: vec![],
            amplitude: 0.5,
            xi: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    /// biot-savart | power-law | zero
    pub name: String,
    pub alpha: f64,
    pub gamma: f64,
    /// 0 selects the default regularization 1e-8 R once the cutoff
    /// radius is known
    pub epsilon: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            name: "biot-savart".into(),
            alpha: 1.0,
            gamma: 0.0,
            epsilon: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VorticityConfig {
    /// cos-bump | zero
    pub name: String,
    pub height: f64,
    pub radius: f64,
}

impl Default for VorticityConfig {
    fn default() -> Self {
        Self {
            name: "cos-bump".into(),
            height: 1.0,
            radius: 1.0,
        }
    }
}

/// Explicit-constant inputs; zeros mean "derive": fit envelopes from the
/// exact density (constant sigma only), default Hoelder exponent,
/// optimized cutoff radius, `tau_max / 4` horizon.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConstantsConfig {
    pub q: f64,
    pub a_stroock: f64,
    pub kappa: f64,
    pub kappa_prime: f64,
    pub r_cutoff: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// 0 selects the bundle horizon `tau`
    pub horizon: f64,
    pub time_nodes: usize,
    pub box_half_width: f64,
    pub nodes_per_axis: usize,
    pub substeps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            horizon: 0.0,
            time_nodes: 3,
            box_half_width: 1.5,
            nodes_per_axis: 7,
            substeps: 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub samples: usize,
    pub paths: usize,
    /// paths for plain simulation / weighting / density subcommands
    pub path_budget: usize,
    pub steps: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            paths: 2,
            path_budget: 50_000,
            steps: 25,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub starts: Vec<Vec<f64>>,
    pub horizon: f64,
    pub paths_per_start: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            starts: vec![vec![0.0, 0.0]],
            horizon: 0.25,
            paths_per_start: 100,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GirsanovConfig {
    /// constant drift vector of the weight checks
    pub drift: Vec<f64>,
    pub times: Vec<f64>,
    pub p_values: Vec<f64>,
    pub horizon: f64,
}

impl Default for GirsanovConfig {
    fn default() -> Self {
        Self {
            drift: vec![1.0, 0.0],
            times: vec![0.1, 0.25],
            p_values: vec![2.0, 4.0],
            horizon: 0.25,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DensityConfig {
    pub time: f64,
    pub bins: usize,
    pub half_width: f64,
    /// constant drift of the drifted-density checks
    pub drift: Vec<f64>,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            time: 0.25,
            bins: 15,
            half_width: 3.0,
            drift: vec![1.0, -0.5],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NvortexConfig {
    pub n: usize,
    pub steps: usize,
    pub dt: f64,
}

impl Default for NvortexConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            steps: 8,
            dt: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ChaosConfig {
    pub ns: Vec<usize>,
    pub replicas: usize,
    pub steps: usize,
}

impl Default for ChaosConfig {
    fn default() -> Self {
        Self {
            ns: vec![100, 1000],
            replicas: 5,
            steps: 4,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: "desk".into(),
            seed: 42,
            diffusion: DiffusionConfig::default(),
            kernel: KernelConfig {
                name: "biot-savart".into(),
                alpha: 1.0,
                gamma: 0.0,
                epsilon: 0.0,
            },
            vorticity: VorticityConfig::default(),
            constants: ConstantsConfig::default(),
            grid: GridConfig::default(),
            mc: McConfig::default(),
            simulate: SimulateConfig::default(),
            girsanov: GirsanovConfig::default(),
            density: DensityConfig::default(),
            nvortex: NvortexConfig::default(),
            chaos: ChaosConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.diffusion.dim == 0 || self.diffusion.dim > 8 {
            return Err(Error::Config("diffusion.dim must be in 1..=8".into()));
        }
        match self.diffusion.sigma.as_str() {
            "identity" | "scaled-identity" | "diag-const" | "diag-sin" => {}
            other => {
                return Err(Error::Config(format!(
                    "diffusion.sigma: unknown family '{other}'"
                )))
            }
        }
        match self.kernel.name.as_str() {
            "biot-savart" | "power-law" | "zero" => {}
            other => return Err(Error::Config(format!("kernel.name: unknown '{other}'"))),
        }
        if self.kernel.name == "biot-savart" && self.diffusion.dim != 2 {
            return Err(Error::Config(
                "kernel.name = biot-savart requires dim = 2".into(),
            ));
        }
        match self.vorticity.name.as_str() {
            "cos-bump" | "zero" => {}
            other => {
                return Err(Error::Config(format!("vorticity.name: unknown '{other}'")))
            }
        }
        if self.mc.samples == 0 || self.mc.paths == 0 || self.mc.path_budget == 0 {
            return Err(Error::Config("mc budgets must be positive".into()));
        }
        if self.grid.time_nodes < 2 || self.grid.nodes_per_axis == 0 || self.grid.substeps == 0 {
            return Err(Error::Config(
                "grid needs >= 2 time nodes, >= 1 node per axis, >= 1 substep".into(),
            ));
        }
        Ok(())
    }

    pub fn diffusion_spec(&self) -> Result<DiffusionSpec> {
        let d = self.diffusion.dim;
        let spec = match self.diffusion.sigma.as_str() {
            "identity" => DiffusionSpec::identity(d),
            "scaled-identity" => DiffusionSpec::scaled_identity(d, self.diffusion.scale)?,
            "diag-const" => DiffusionSpec::diag_const(self.diffusion.entries.clone())?,
            "diag-sin" => DiffusionSpec::diag_sin(d, self.diffusion.amplitude)?,
            other => return Err(Error::Config(format!("unknown sigma family '{other}'"))),
        };
        if self.diffusion.xi > 0.0 {
            spec.with_xi(self.diffusion.xi)
        } else {
            Ok(spec)
        }
    }

    /// Kernel with the configured or bundle-derived regularization.
    pub fn kernel_spec(&self, r_cutoff: f64) -> Result<KernelSpec> {
        let eps = if self.kernel.epsilon > 0.0 {
            self.kernel.epsilon
        } else if r_cutoff.is_finite() {
            1e-8 * r_cutoff
        } else {
            0.0
        };
        match self.kernel.name.as_str() {
            "biot-savart" => Ok(KernelSpec::biot_savart(eps)),
            "power-law" => {
                KernelSpec::power_law(self.diffusion.dim, self.kernel.alpha, self.kernel.gamma, eps)
            }
            "zero" => KernelSpec::power_law(self.diffusion.dim, 0.0, 0.0, eps),
            other => Err(Error::Config(format!("unknown kernel '{other}'"))),
        }
    }

    pub fn vorticity_spec(&self) -> Result<VorticitySpec> {
        match self.vorticity.name.as_str() {
            "cos-bump" => VorticitySpec::cosine_bump(
                self.diffusion.dim,
                self.vorticity.height,
                self.vorticity.radius,
            ),
            "zero" => Ok(VorticitySpec::zero(self.diffusion.dim)),
            other => Err(Error::Config(format!("unknown vorticity '{other}'"))),
        }
    }

    /// Assemble the constants bundle, fitting envelope constants from the
    /// exact density when they are not pinned in the config.
    pub fn bundle(&self) -> Result<ConstantsBundle> {
        let spec = self.diffusion_spec()?;
        let need_fit = self.constants.a_stroock == 0.0
            || self.constants.kappa == 0.0
            || self.constants.kappa_prime == 0.0;
        let (a, kappa, kappa_prime, empirical) = if need_fit {
            let rate = spec.constant_isotropic_rate().ok_or_else(|| {
                Error::Config(
                    "envelope constants must be given explicitly for non-constant sigma \
                     (numerical fits from exact densities need the constant family)"
                        .into(),
                )
            })?;
            let fit = fit_envelopes_exact(rate, self.diffusion.dim)?;
            (
                if self.constants.a_stroock > 0.0 {
                    self.constants.a_stroock
                } else {
                    fit.a_stroock
                },
                if self.constants.kappa > 0.0 {
                    self.constants.kappa
                } else {
                    fit.kappa
                },
                if self.constants.kappa_prime > 0.0 {
                    self.constants.kappa_prime
                } else {
                    fit.kappa_prime
                },
                false,
            )
        } else {
            (
                self.constants.a_stroock,
                self.constants.kappa,
                self.constants.kappa_prime,
                false,
            )
        };
        let w = self.vorticity_spec()?;
        let (alpha, gamma) = match self.kernel.name.as_str() {
            "biot-savart" => (1.0 / (2.0 * std::f64::consts::PI), 1.0),
            "power-law" => (self.kernel.alpha, self.kernel.gamma),
            _ => (0.0, 0.0),
        };
        if alpha == 0.0 || w.w_l1() == 0.0 {
            return Err(Error::Config(
                "constants bundle needs a nonzero kernel and vorticity".into(),
            ));
        }
        build_bundle(&BundleInputs {
            d: self.diffusion.dim,
            xi: spec.xi(),
            a_stroock: a,
            kappa,
            kappa_prime,
            q: if self.constants.q > 0.0 {
                Some(self.constants.q)
            } else {
                None
            },
            alpha,
            gamma,
            w_l1: w.w_l1(),
            w_linf: w.w_linf(),
            r_cutoff: if self.constants.r_cutoff > 0.0 {
                Some(self.constants.r_cutoff)
            } else {
                None
            },
            tau: if self.constants.tau > 0.0 {
                Some(self.constants.tau)
            } else {
                None
            },
            empirical_envelopes: empirical,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_identity() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(text, back.to_toml());
    }

    #[test]
    fn unknown_field_rejected() {
        let text = "scenario = \"x\"\nseed = 1\nbogus = 3\n";
        assert!(RunConfig::from_toml(text).is_err());
    }

    #[test]
    fn bad_family_rejected() {
        let mut cfg = RunConfig::default();
        cfg.diffusion.sigma = "weird".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn xi_override_widens_only() {
        let mut cfg = RunConfig::default();
        cfg.diffusion.sigma = "diag-sin".into();
        cfg.diffusion.xi = 5.0; // the family needs 4
        assert_eq!(cfg.diffusion_spec().unwrap().xi(), 5.0);
        cfg.diffusion.xi = 2.0;
        assert!(cfg.diffusion_spec().is_err());
    }

    #[test]
    fn bundle_of_default_biot_savart() {
        let mut cfg = RunConfig::default();
        cfg.kernel.name = "biot-savart".into();
        let b = cfg.bundle().unwrap();
        assert!(b.c > 1.0);
        assert!(b.tau < b.tau_max);
        assert!(b.factor < 1.0);
    }
}
