//! Builtin experiment configs shipped with the binary.

const BUILTIN: [(&str, &str); 4] = [
    ("free_gaussian_1d", include_str!("../scenarios/free_gaussian_1d.toml")),
    (
        "gaussian_well_scatter_1d",
        include_str!("../scenarios/gaussian_well_scatter_1d.toml"),
    ),
    (
        "poschl_teller_mixed_1d",
        include_str!("../scenarios/poschl_teller_mixed_1d.toml"),
    ),
    (
        "gaussian_well_3d_small",
        include_str!("../scenarios/gaussian_well_3d_small.toml"),
    ),
];

pub fn list_scenarios() -> Vec<&'static str> {
    BUILTIN.iter().map(|(name, _)| *name).collect()
}

/// TOML source of a builtin scenario.
pub fn builtin(name: &str) -> Option<&'static str> {
    BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ExperimentConfig, InitialSpec};
    use bohmflow_core::potentials::validate_short_range;

    #[test]
    fn ships_at_least_four_scenarios() {
        assert!(list_scenarios().len() >= 4);
    }

    #[test]
    fn every_builtin_parses_and_names_itself() {
        for name in list_scenarios() {
            let cfg = ExperimentConfig::from_toml(builtin(name).unwrap()).unwrap();
            assert_eq!(cfg.name, name);
        }
    }

    #[test]
    fn every_builtin_potential_is_short_range() {
        for name in list_scenarios() {
            let cfg = ExperimentConfig::from_toml(builtin(name).unwrap()).unwrap();
            let report = validate_short_range(&cfg.potential, cfg.spectral.decay_order, &cfg.grid().unwrap()).unwrap();
            assert!(report.pass, "{name}: {report:?}");
        }
    }

    #[test]
    fn mixed_scenario_declares_a_bound_part() {
        let cfg = ExperimentConfig::from_toml(builtin("poschl_teller_mixed_1d").unwrap()).unwrap();
        assert!(matches!(cfg.initial, InitialSpec::BoundMix { .. }));
        assert!(cfg.declared_pp_weight().unwrap() > 0.0);
    }
}
