//! Run configuration. Every field is required; values not given in a user
//! file come from the committed `configs/defaults.json`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use homog::cellsolve::Permittivity;

pub const DEFAULTS: &str = include_str!("../../../configs/defaults.json");

/// A permittivity: a positive number or `"INFINITE"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsSpec {
    Value(f64),
    Name(String),
}

impl EpsSpec {
    pub fn resolve(&self) -> Result<Permittivity, String> {
        match self {
            EpsSpec::Value(v) if *v > 0.0 && v.is_finite() => Ok(Permittivity::Finite(*v)),
            EpsSpec::Value(v) => Err(format!("permittivity {v} must be positive and finite")),
            EpsSpec::Name(s) if s.eq_ignore_ascii_case("INFINITE") => Ok(Permittivity::Infinite),
            EpsSpec::Name(s) => Err(format!("permittivity `{s}` is neither a number nor INFINITE")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSection {
    pub a: f64,
    pub target_h: f64,
    pub eps_e: f64,
    pub eps_i: EpsSpec,
    pub modes: Vec<String>,
    pub rho: String,
    pub anchor: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectiveSection {
    pub a_values: Vec<f64>,
    pub target_h: f64,
    pub eps_e: f64,
    pub eps_i: EpsSpec,
    pub psi_mode: String,
    pub xi_mode: String,
    pub rho: String,
    pub anchor: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsIntSection {
    pub q1: String,
    pub q2: String,
    pub a_of_x: String,
    pub x_hat: [f64; 2],
    pub delta_values: Vec<f64>,
    pub n_quad: usize,
    /// `closed` or `arc`.
    pub target: String,
    pub arc: [f64; 2],
    pub prefactor_exponent: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroSection {
    pub a_of_x: String,
    pub rho_mode: String,
    pub rho: String,
    pub boundary_value: String,
    pub grid_n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DnsSection {
    pub a_of_x: String,
    pub eps_e: f64,
    pub eps_i: f64,
    pub rho: String,
    pub boundary_value: String,
    pub mode: String,
    pub resolution_per_cell: usize,
    pub delta_values: Vec<f64>,
    pub macro_grid_n: usize,
    /// Tabulated on the same per-cell mesh the simulation uses.
    pub table_a_values: Vec<f64>,
    pub table_rho: String,
    /// Inclusion permittivities rerun alongside `eps_i` to bracket it.
    pub contrast_bracket: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSection {
    pub a_values: Vec<f64>,
    pub contrast: f64,
    pub target_h: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormsSection {
    pub q1: String,
    pub q2: String,
    pub a_sloped: String,
    pub a_flat: String,
    pub x_hat: [f64; 2],
    pub delta_values: Vec<f64>,
    pub n_quad: usize,
    pub arc: [f64; 2],
    pub prefactor_exponent: f64,
    pub min_slope: f64,
    pub max_naive_slope: f64,
    pub misfit_tolerance: f64,
    pub consistency_tolerance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChargeSection {
    pub table_a_values: Vec<f64>,
    pub target_h: f64,
    pub rho: String,
    pub a_intercept: f64,
    pub a_slope: f64,
    pub check_a: Vec<f64>,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitSection {
    pub a_values: Vec<f64>,
    pub contrasts: Vec<f64>,
    pub target_h: f64,
    pub final_gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiluteSection {
    pub a: f64,
    pub target_h: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DnsCheckSection {
    pub max_ratio: f64,
    pub min_slope: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantSection {
    pub a_values: Vec<f64>,
    pub eps_i_values: Vec<EpsSpec>,
    pub rho: String,
    pub anchor: [f64; 2],
    pub target_h: f64,
    pub transport_tolerance: f64,
    pub table_eps_i: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSection {
    pub eps_e: f64,
    pub route: RouteSection,
    pub forms: FormsSection,
    pub charge: ChargeSection,
    pub limit: LimitSection,
    pub dilute: DiluteSection,
    pub dns: DnsCheckSection,
    pub invariants: InvariantSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: String,
    pub cell: CellSection,
    pub effective: EffectiveSection,
    pub msint: MsIntSection,
    #[serde(rename = "macro")]
    pub macro_: MacroSection,
    pub dns: DnsSection,
    pub suite: SuiteSection,
}

/// Objects merge key by key; anything else in `over` replaces `base`.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// The defaults overlaid with `text`, as a JSON value.
pub fn overlay(text: &str) -> Result<Value, String> {
    let mut base: Value = serde_json::from_str(DEFAULTS).map_err(|e| format!("defaults: {e}"))?;
    let over: Value = serde_json::from_str(text).map_err(|e| format!("config is not valid JSON: {e}"))?;
    if !over.is_object() {
        return Err("config must be a JSON object".into());
    }
    merge(&mut base, over);
    Ok(base)
}

pub fn from_value(v: Value) -> Result<RunConfig, String> {
    serde_json::from_value(v).map_err(|e| format!("config: {e}"))
}

pub fn defaults() -> RunConfig {
    from_value(serde_json::from_str(DEFAULTS).expect("defaults parse")).expect("defaults match the schema")
}
