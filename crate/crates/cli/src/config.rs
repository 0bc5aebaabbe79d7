//! JSON config file support. Every field is optional; absent fields keep
//! their defaults, and command-line flags override file values.

use serde::{Deserialize, Deserializer};

use covis_core::eval::SplitSpec;
use covis_core::sampler::SamplerConfig;

/// Keeps "field present but null" distinguishable from "field absent":
/// absent stays the outer `None` via the field default, while any present
/// value (null included) lands in `Some(..)`.
fn present<'de, D: Deserializer<'de>>(de: D) -> Result<Option<Option<f64>>, D::Error> {
    Option::<f64>::deserialize(de).map(Some)
}

/// Parsed config file. `budget_secs` distinguishes an absent field (keep the
/// default) from an explicit `null` (disable the budget).
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dim: Option<usize>,
    pub sigma_u: Option<f64>,
    pub sigma_g: Option<f64>,
    pub sigma_qu: Option<f64>,
    pub sigma_qg: Option<f64>,
    pub sigma_r: Option<f64>,
    pub burn_in: Option<usize>,
    pub samples: Option<usize>,
    pub epsilon: Option<f64>,
    pub anneal: Option<bool>,
    pub max_em_iters: Option<usize>,
    pub stability_tol: Option<f64>,
    #[serde(default, deserialize_with = "present")]
    pub budget_secs: Option<Option<f64>>,
    pub normalize_stride: Option<usize>,
    pub seed: Option<u64>,
    pub test_user_fraction: Option<f64>,
    pub test_item_fraction: Option<f64>,
    pub train_users: Option<usize>,
    pub train_items: Option<usize>,
    pub replicas: Option<usize>,
    pub variant: Option<String>,
    pub variants: Option<Vec<String>>,
    pub scale_min: Option<f64>,
    pub scale_max: Option<f64>,
    pub plot_size: Option<f64>,
    pub plot_point_radius: Option<f64>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    /// Copy every present sampler field onto `c`.
    pub fn apply_sampler(&self, c: &mut SamplerConfig) {
        if let Some(v) = self.dim {
            c.dim = v;
        }
        if let Some(v) = self.sigma_u {
            c.sigma_u = v;
        }
        if let Some(v) = self.sigma_g {
            c.sigma_g = v;
        }
        if let Some(v) = self.sigma_qu {
            c.sigma_qu = v;
        }
        if let Some(v) = self.sigma_qg {
            c.sigma_qg = v;
        }
        if let Some(v) = self.sigma_r {
            c.sigma_r = v;
        }
        if let Some(v) = self.burn_in {
            c.burn_in = v;
        }
        if let Some(v) = self.samples {
            c.samples = v;
        }
        if let Some(v) = self.epsilon {
            c.epsilon = v;
        }
        if let Some(v) = self.anneal {
            c.anneal = v;
        }
        if let Some(v) = self.max_em_iters {
            c.max_em_iters = v;
        }
        if let Some(v) = self.stability_tol {
            c.stability_tol = v;
        }
        if let Some(v) = self.budget_secs {
            c.budget_secs = v;
        }
        if let Some(v) = self.normalize_stride {
            c.normalize_stride = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
    }

    /// Copy every present split field onto `s`.
    pub fn apply_split(&self, s: &mut SplitSpec) {
        if let Some(v) = self.test_user_fraction {
            s.test_user_fraction = v;
        }
        if let Some(v) = self.test_item_fraction {
            s.test_item_fraction = v;
        }
        if let Some(v) = self.train_users {
            s.train_users = Some(v);
        }
        if let Some(v) = self.train_items {
            s.train_items = Some(v);
        }
        if let Some(v) = self.replicas {
            s.replicas = v;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_field_parses_and_applies() {
        let text = r#"{
            "dim": 3, "sigma_u": 2.0, "sigma_g": 2.5, "sigma_qu": 0.5,
            "sigma_qg": 0.6, "sigma_r": 0.1, "burn_in": 10, "samples": 20,
            "epsilon": 0.05, "anneal": false, "max_em_iters": 7,
            "stability_tol": 0.01, "budget_secs": 5.0, "normalize_stride": 2,
            "seed": 42, "test_user_fraction": 0.3, "test_item_fraction": 0.2,
            "train_users": 8, "train_items": 9, "replicas": 4,
            "variant": "mcmc", "variants": ["mcmc", "random"],
            "scale_min": 1.0, "scale_max": 5.0,
            "plot_size": 800.0, "plot_point_radius": 3.0
        }"#;
        let file = FileConfig::parse(text).unwrap();
        let mut c = SamplerConfig::new(2);
        file.apply_sampler(&mut c);
        assert_eq!(c.dim, 3);
        assert_eq!(c.sigma_u, 2.0);
        assert_eq!(c.sigma_r, 0.1);
        assert_eq!(c.burn_in, 10);
        assert_eq!(c.samples, 20);
        assert!(!c.anneal);
        assert_eq!(c.budget_secs, Some(5.0));
        assert_eq!(c.seed, 42);
        let mut s = SplitSpec::new(0);
        file.apply_split(&mut s);
        assert_eq!(s.test_user_fraction, 0.3);
        assert_eq!(s.train_users, Some(8));
        assert_eq!(s.train_items, Some(9));
        assert_eq!(s.replicas, 4);
        assert_eq!(s.seed, 42);
        assert_eq!(file.variant.as_deref(), Some("mcmc"));
        assert_eq!(file.scale_max, Some(5.0));
    }

    #[test]
    fn absent_budget_keeps_default_null_disables_it() {
        let absent = FileConfig::parse("{}").unwrap();
        let mut c = SamplerConfig::new(2);
        let default_budget = c.budget_secs;
        absent.apply_sampler(&mut c);
        assert_eq!(c.budget_secs, default_budget);

        let null = FileConfig::parse(r#"{"budget_secs": null}"#).unwrap();
        null.apply_sampler(&mut c);
        assert_eq!(c.budget_secs, None);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = FileConfig::parse(r#"{"bogus": 1}"#).unwrap_err();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn sampler_echo_round_trips_through_the_parser() {
        // A serialized sampler config must parse back as a config file, so
        // a run can be reproduced from its own report.
        let mut c = SamplerConfig::new(4);
        c.seed = 77;
        c.budget_secs = None;
        let text = serde_json::to_string(&c).unwrap();
        let file = FileConfig::parse(&text).unwrap();
        let mut d = SamplerConfig::new(1);
        file.apply_sampler(&mut d);
        assert_eq!(c, d);
    }
}
