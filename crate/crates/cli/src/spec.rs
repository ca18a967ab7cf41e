//! Plain-text study specifications: one `key = value` per line, `#` starts a
//! comment. Reals may be written as decimals, fractions (`3/2`) or powers
//! (`2^-12`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use sdeconv_core::experiments::{ConvergenceStudyConfig, Reference};
use sdeconv_core::models::{AitSahaliaParams, GbmParams, Heston32Params, ModelSpec, PolyStressParams};
use sdeconv_core::schemes::Scheme;
use sdeconv_core::sde::SchemeParams;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecError(pub String);

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for SpecError {}

fn err<T>(msg: impl Into<String>) -> Result<T, SpecError> {
    Err(SpecError(msg.into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudySpec {
    pub config: ConvergenceStudyConfig,
    pub output: Option<PathBuf>,
}

const COMMON_KEYS: &[&str] = &[
    "model",
    "scheme",
    "theta",
    "eta",
    "t_end",
    "samples",
    "fine_exponent",
    "h_exact",
    "coarse_exponents",
    "stepsizes",
    "seed",
    "output",
    "reference",
    "x0",
];

fn model_keys(model: &str) -> Option<&'static [&'static str]> {
    Some(match model {
        "heston32" => &["mu", "alpha", "beta"],
        "ait-sahalia" => &["alpha_m1", "alpha_0", "alpha_1", "alpha_2", "sigma", "kappa", "rho"],
        "gbm" => &["mu", "sigma"],
        "poly-stress" => &["sigma"],
        _ => return None,
    })
}

const ALL_MODEL_KEYS: &[&str] = &[
    "mu", "alpha", "beta", "alpha_m1", "alpha_0", "alpha_1", "alpha_2", "sigma", "kappa", "rho",
];

/// Parses a real written as a decimal, `a/b` or `base^exponent`.
pub fn parse_real(text: &str) -> Result<f64, SpecError> {
    let t = text.trim();
    let value = if let Some((base, exp)) = t.split_once('^') {
        parse_real(base)?.powf(parse_real(exp)?)
    } else if let Some((num, den)) = t.split_once('/') {
        parse_real(num)? / parse_real(den)?
    } else {
        t.parse::<f64>().map_err(|_| SpecError(format!("{t:?} is not a number")))?
    };
    if value.is_finite() {
        Ok(value)
    } else {
        err(format!("{t:?} is not a finite number"))
    }
}

fn parse_int<T: std::str::FromStr>(key: &str, text: &str) -> Result<T, SpecError> {
    text.trim()
        .parse()
        .map_err(|_| SpecError(format!("{key}: {:?} is not a non-negative integer", text.trim())))
}

/// `k` with `h = t_end 2^-k`, if `h` is such a step.
fn dyadic_exponent(key: &str, h: f64, t_end: f64) -> Result<u32, SpecError> {
    let k = (t_end / h).log2().round();
    if (0.0..=30.0).contains(&k) {
        let back = t_end / 2f64.powi(k as i32);
        if (back - h).abs() <= 1e-12 * h {
            return Ok(k as u32);
        }
    }
    err(format!("{key}: step {h} is not t_end * 2^-k for an integer k in 0..=30"))
}

fn parse_exponent_list(text: &str) -> Result<Vec<u32>, SpecError> {
    let t = text.trim();
    if let Some((lo, hi)) = t.split_once("..") {
        let lo: u32 = parse_int("coarse_exponents", lo)?;
        let hi: u32 = parse_int("coarse_exponents", hi.trim_start_matches('='))?;
        if lo > hi {
            return err(format!("coarse_exponents: empty range {t:?}"));
        }
        return Ok((lo..=hi).collect());
    }
    list_items(t).map(|s| parse_int("coarse_exponents", s)).collect()
}

fn list_items(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty())
}

/// Parses a study specification.
pub fn parse_spec(text: &str) -> Result<StudySpec, SpecError> {
    let mut entries: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return err(format!("line {}: expected key = value, got {line:?}", i + 1));
        };
        let (key, value) = (key.trim(), value.trim());
        if !COMMON_KEYS.contains(&key) && !ALL_MODEL_KEYS.contains(&key) {
            return err(format!("line {}: unknown key {key:?}", i + 1));
        }
        if let Some((first, _)) = entries.insert(key, (i + 1, value)) {
            return err(format!("line {}: key {key:?} already set on line {first}", i + 1));
        }
    }
    let get = |k: &str| entries.get(k).map(|&(_, v)| v);
    let real = |k: &str| get(k).map(parse_real).transpose().map_err(|e| SpecError(format!("{k}: {e}")));
    let required = |k: &str, why: &str| -> Result<f64, SpecError> {
        real(k)?.ok_or_else(|| SpecError(format!("missing required key {k:?} ({why})")))
    };

    let model_name = get("model").ok_or_else(|| SpecError("missing required key \"model\"".into()))?;
    let Some(own_keys) = model_keys(model_name) else {
        return err(format!(
            "model: unknown model {model_name:?}; expected one of {}",
            ModelSpec::NAMES.join(", ")
        ));
    };
    if let Some(stray) = ALL_MODEL_KEYS
        .iter()
        .find(|k| entries.contains_key(*k) && !own_keys.contains(k))
    {
        return err(format!("key {stray:?} is not a parameter of model {model_name}"));
    }
    let why = format!("parameter of {model_name}");
    let need = |k: &str| required(k, &why);
    let x0 = real("x0")?.unwrap_or(1.0);
    let model = match model_name {
        "heston32" => Heston32Params::new(need("mu")?, need("alpha")?, need("beta")?, x0).map(ModelSpec::Heston32),
        "ait-sahalia" => AitSahaliaParams::new(
            need("alpha_m1")?,
            need("alpha_0")?,
            need("alpha_1")?,
            need("alpha_2")?,
            need("sigma")?,
            need("kappa")?,
            need("rho")?,
            x0,
        )
        .map(ModelSpec::AitSahalia),
        "gbm" => GbmParams::new(need("mu")?, need("sigma")?, x0).map(ModelSpec::Gbm),
        _ => {
            let sigma = need("sigma")?;
            if !(sigma >= 0.0) {
                return err(format!("sigma = {sigma} must be non-negative"));
            }
            Ok(ModelSpec::PolyStress(PolyStressParams { sigma, x0 }))
        }
    }
    .map_err(|e| SpecError(e.to_string()))?;

    let scheme_name = get("scheme").unwrap_or("milstein");
    let scheme = match scheme_name {
        "milstein" => {
            let theta = required("theta", "scheme milstein")?;
            let eta = required("eta", "scheme milstein")?;
            Scheme::Milstein(SchemeParams::new(theta, eta).map_err(|e| SpecError(e.to_string()))?)
        }
        "euler-maruyama" | "backward-euler" => {
            if let Some(k) = ["theta", "eta"].into_iter().find(|k| entries.contains_key(k)) {
                return err(format!("key {k:?} is not used by scheme {scheme_name}"));
            }
            if scheme_name == "euler-maruyama" {
                Scheme::EulerMaruyama
            } else {
                Scheme::BackwardEuler(SchemeParams::new(1.0, 0.0).map_err(|e| SpecError(e.to_string()))?)
            }
        }
        other => {
            return err(format!(
                "scheme: unknown scheme {other:?}; expected milstein, euler-maruyama or backward-euler"
            ))
        }
    };

    let mut cfg = ConvergenceStudyConfig::new(model, scheme);
    if let Some(t) = real("t_end")? {
        cfg.t_end = t;
    }
    if !(cfg.t_end > 0.0) {
        return err(format!("t_end = {} must be positive", cfg.t_end));
    }
    if let Some(s) = get("samples") {
        cfg.samples = parse_int("samples", s)?;
    }
    cfg.fine_exponent = match (get("fine_exponent"), real("h_exact")?) {
        (Some(_), Some(_)) => return err("set only one of fine_exponent and h_exact"),
        (Some(e), None) => parse_int("fine_exponent", e)?,
        (None, Some(h)) => dyadic_exponent("h_exact", h, cfg.t_end)?,
        (None, None) => cfg.fine_exponent,
    };
    cfg.coarse_exponents = match (get("coarse_exponents"), get("stepsizes")) {
        (Some(_), Some(_)) => return err("set only one of coarse_exponents and stepsizes"),
        (Some(list), None) => parse_exponent_list(list)?,
        (None, Some(list)) => list_items(list)
            .map(|s| dyadic_exponent("stepsizes", parse_real(s)?, cfg.t_end))
            .collect::<Result<_, _>>()?,
        (None, None) => cfg.coarse_exponents,
    };
    if let Some(s) = get("seed") {
        cfg.seed = parse_int("seed", s)?;
    }
    cfg.reference = match get("reference").unwrap_or("fine") {
        "fine" => Reference::FineScheme,
        "exact" => Reference::Exact,
        other => return err(format!("reference: {other:?} must be fine or exact")),
    };
    cfg.validate().map_err(|e| SpecError(e.to_string()))?;
    Ok(StudySpec {
        config: cfg,
        output: get("output").map(PathBuf::from),
    })
}

/// Replaces the spec seed with the value of the seed override variable.
pub fn apply_seed_override(spec: &mut StudySpec, value: Option<&str>) -> Result<(), SpecError> {
    if let Some(v) = value {
        spec.config.seed = parse_int("SDECONV_SEED", v)?;
    }
    Ok(())
}
