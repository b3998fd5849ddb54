//! Run configuration: a flat `key = value` text format with an optional
//! `[outer]` section, parseable with nothing but line splitting.
//!
//! Every key has a documented default; parsing an empty file yields the
//! standard 2D configuration. Unknown keys and duplicate keys are rejected
//! with their line numbers. `serialize` emits every resolved key, so
//! parse -> serialize -> parse is the identity and a run directory's copy of
//! the config fully describes the run.

use std::collections::BTreeSet;
use std::path::PathBuf;

use gemflow::datasets::{DatasetId, DatasetSpec};
use gemflow::flow::{Estimator, FlowConfig, OuterConfig};
use gemflow::velocity::FDivergence;
use gemflow::{Error, Result};

/// Everything a `train-flow` run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub flow: FlowConfig,
    /// Hidden-layer widths of the ratio network; input 2 and output 1 are
    /// implied.
    pub net_hidden: Vec<usize>,
    pub dataset: DatasetId,
    pub dataset_scale: f64,
    pub dataset_noise: Option<f64>,
    pub reference: DatasetId,
    pub reference_scale: f64,
    pub n: usize,
    pub out_dir: PathBuf,
    pub checkpoint_every: usize,
    pub plots: bool,
    pub outer: Option<OuterBlock>,
}

/// The optional `[outer]` section: latent dimension, generator shape, and
/// the alternation schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterBlock {
    pub latent_dim: usize,
    /// Hidden-layer widths of the generator; input `latent_dim` and output 2
    /// are implied.
    pub gen_hidden: Vec<usize>,
    pub cfg: OuterConfig,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            flow: FlowConfig::standard(Estimator::Lsdr, FDivergence::Chi2),
            net_hidden: vec![64, 64, 64],
            dataset: DatasetId::Moons,
            dataset_scale: 1.0,
            dataset_noise: None,
            reference: DatasetId::GaussianRef,
            reference_scale: 1.0,
            n: 50_000,
            out_dir: PathBuf::from("run"),
            checkpoint_every: 1000,
            plots: true,
            outer: None,
        }
    }
}

impl RunConfig {
    /// The target sample's seed is the run seed itself, so a `K=0` run's
    /// particle file is byte-identical to `sample-data` with the same seed.
    pub fn reference_spec(&self) -> DatasetSpec {
        DatasetSpec {
            id: self.reference,
            scale: self.reference_scale,
            noise: None,
            seed: self.flow.seed,
        }
    }

    pub fn target_spec(&self) -> DatasetSpec {
        DatasetSpec {
            id: self.dataset,
            scale: self.dataset_scale,
            noise: self.dataset_noise,
            seed: gemflow::mix_seed(self.flow.seed, 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("n must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidConfig(
                "checkpoint_every must be at least 1".into(),
            ));
        }
        self.reference_spec().validate()?;
        self.target_spec().validate()?;
        if self.flow.iterations > 0 {
            self.flow.validate(self.n)?;
        }
        if let Some(outer) = &self.outer {
            if outer.latent_dim == 0 {
                return Err(Error::InvalidConfig("latent_dim must be at least 1".into()));
            }
            outer.cfg.validate()?;
            if self.flow.iterations == 0 {
                return Err(Error::InvalidConfig(
                    "outer runs need iterations >= 1".into(),
                ));
            }
        }
        Ok(())
    }

    /// Renders the fully resolved configuration; parsing it back yields an
    /// identical `RunConfig`.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("estimator", self.flow.estimator.name().into());
        kv("divergence", self.flow.divergence.name().into());
        kv("dataset", self.dataset.name().into());
        kv("dataset_scale", format!("{}", self.dataset_scale));
        if let Some(noise) = self.dataset_noise {
            kv("dataset_noise", format!("{}", noise));
        }
        kv("reference", self.reference.name().into());
        kv("reference_scale", format!("{}", self.reference_scale));
        kv("n", format!("{}", self.n));
        kv("seed", format!("{}", self.flow.seed));
        kv("step_size", format!("{}", self.flow.step_size));
        kv("iterations", format!("{}", self.flow.iterations));
        kv("fit_rounds", format!("{}", self.flow.fit_rounds));
        kv("penalty_alpha", format!("{}", self.flow.penalty_alpha));
        kv("batch_size", format!("{}", self.flow.batch_size));
        kv("learning_rate", format!("{}", self.flow.learning_rate));
        kv("v_max", format!("{}", self.flow.v_max));
        kv("diag_every", format!("{}", self.flow.diag_every));
        kv("diag_w2", format!("{}", self.flow.diag_w2));
        kv("diag_mmd", format!("{}", self.flow.diag_mmd));
        kv("reinit_net", format!("{}", self.flow.reinit_net));
        kv("net_widths", join_widths(&self.net_hidden));
        kv("out", self.out_dir.display().to_string());
        kv("checkpoint_every", format!("{}", self.checkpoint_every));
        kv("plots", format!("{}", self.plots));
        if let Some(outer) = &self.outer {
            s.push_str("\n[outer]\n");
            let mut kv = |k: &str, v: String| {
                s.push_str(k);
                s.push_str(" = ");
                s.push_str(&v);
                s.push('\n');
            };
            kv("latent_dim", format!("{}", outer.latent_dim));
            kv("gen_widths", join_widths(&outer.gen_hidden));
            kv("rounds", format!("{}", outer.cfg.rounds));
            kv("inner_per_outer", format!("{}", outer.cfg.inner_per_outer));
            kv("gen_epochs", format!("{}", outer.cfg.gen_epochs));
            kv("gen_lr", format!("{}", outer.cfg.gen_lr));
            kv("latent_count", format!("{}", outer.cfg.latent_count));
        }
        s
    }

    /// Parses config text. Missing keys keep their documented defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut outer = OuterBlock {
            latent_dim: 2,
            gen_hidden: vec![64, 64],
            cfg: OuterConfig {
                rounds: 128,
                inner_per_outer: 20,
                gen_epochs: 200,
                gen_lr: 5e-4,
                latent_count: 0, // 0 = follow n
            },
        };
        let mut has_outer = false;
        let mut in_outer = false;
        let mut seen: BTreeSet<String> = BTreeSet::new();

        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let bad = |msg: String| Error::InvalidConfig(format!("line {}: {}", lineno, msg));
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(section) = line.strip_prefix('[') {
                let name = section.strip_suffix(']').ok_or_else(|| {
                    bad(format!("malformed section header '{}'", line))
                })?;
                if name.trim() != "outer" {
                    return Err(bad(format!("unknown section '{}'", name.trim())));
                }
                in_outer = true;
                has_outer = true;
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected 'key = value', got '{}'", line)))?;
            let key = key.trim();
            let value = value.trim();
            let scoped = if in_outer {
                format!("outer.{}", key)
            } else {
                key.to_string()
            };
            if !seen.insert(scoped.clone()) {
                return Err(bad(format!("duplicate key '{}'", scoped)));
            }
            if in_outer {
                parse_outer_key(&mut outer, key, value).map_err(|e| bad(e.to_string()))?;
            } else {
                parse_main_key(&mut cfg, key, value).map_err(|e| bad(e.to_string()))?;
            }
        }
        if has_outer {
            if outer.cfg.latent_count == 0 {
                outer.cfg.latent_count = cfg.n;
            }
            cfg.outer = Some(outer);
        }
        Ok(cfg)
    }
}

fn join_widths(widths: &[usize]) -> String {
    let parts: Vec<String> = widths.iter().map(|w| format!("{}", w)).collect();
    parts.join(",")
}

fn parse_widths(value: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in value.split(',') {
        let w: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("'{}' is not a layer width", part.trim())))?;
        if w == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        out.push(w);
    }
    Ok(out)
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|_| Error::InvalidConfig(format!("{} wants a number, got '{}'", key, value)))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse::<usize>()
        .map_err(|_| Error::InvalidConfig(format!("{} wants a nonnegative integer, got '{}'", key, value)))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::InvalidConfig(format!(
            "{} wants true or false, got '{}'",
            key, value
        ))),
    }
}

fn parse_main_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "estimator" => cfg.flow.estimator = Estimator::parse(value)?,
        "divergence" => cfg.flow.divergence = FDivergence::parse(value)?,
        "dataset" => cfg.dataset = DatasetId::parse(value)?,
        "dataset_scale" => cfg.dataset_scale = parse_f64(key, value)?,
        "dataset_noise" => cfg.dataset_noise = Some(parse_f64(key, value)?),
        "reference" => cfg.reference = DatasetId::parse(value)?,
        "reference_scale" => cfg.reference_scale = parse_f64(key, value)?,
        "n" => cfg.n = parse_usize(key, value)?,
        "seed" => {
            cfg.flow.seed = value
                .parse::<u64>()
                .map_err(|_| Error::InvalidConfig(format!("seed wants an integer, got '{}'", value)))?
        }
        "step_size" => cfg.flow.step_size = parse_f64(key, value)?,
        "iterations" => cfg.flow.iterations = parse_usize(key, value)?,
        "fit_rounds" => cfg.flow.fit_rounds = parse_usize(key, value)?,
        "penalty_alpha" => cfg.flow.penalty_alpha = parse_f64(key, value)?,
        "batch_size" => cfg.flow.batch_size = parse_usize(key, value)?,
        "learning_rate" => cfg.flow.learning_rate = parse_f64(key, value)?,
        "v_max" => cfg.flow.v_max = parse_f64(key, value)?,
        "diag_every" => cfg.flow.diag_every = parse_usize(key, value)?,
        "diag_w2" => cfg.flow.diag_w2 = parse_bool(key, value)?,
        "diag_mmd" => cfg.flow.diag_mmd = parse_bool(key, value)?,
        "reinit_net" => cfg.flow.reinit_net = parse_bool(key, value)?,
        "net_widths" => cfg.net_hidden = parse_widths(value)?,
        "out" => cfg.out_dir = PathBuf::from(value),
        "checkpoint_every" => cfg.checkpoint_every = parse_usize(key, value)?,
        "plots" => cfg.plots = parse_bool(key, value)?,
        other => {
            return Err(Error::InvalidConfig(format!("unknown key '{}'", other)));
        }
    }
    Ok(())
}

fn parse_outer_key(outer: &mut OuterBlock, key: &str, value: &str) -> Result<()> {
    match key {
        "latent_dim" => outer.latent_dim = parse_usize(key, value)?,
        "gen_widths" => outer.gen_hidden = parse_widths(value)?,
        "rounds" => outer.cfg.rounds = parse_usize(key, value)?,
        "inner_per_outer" => outer.cfg.inner_per_outer = parse_usize(key, value)?,
        "gen_epochs" => outer.cfg.gen_epochs = parse_usize(key, value)?,
        "gen_lr" => outer.cfg.gen_lr = parse_f64(key, value)?,
        "latent_count" => outer.cfg.latent_count = parse_usize(key, value)?,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown key '{}' in [outer]",
                other
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_documented_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.flow.step_size, 0.005);
        assert_eq!(cfg.n, 50_000);
        assert_eq!(cfg.flow.penalty_alpha, 0.0);
        assert_eq!(cfg.flow.fit_rounds, 5);
        assert_eq!(cfg.flow.learning_rate, 0.0005);
        assert_eq!(cfg.flow.batch_size, 1000);
    }

    #[test]
    fn parse_serialize_parse_is_identity() {
        let text = "
            estimator = lr
            divergence = kl
            dataset = eight_gaussians
            dataset_noise = 0.15
            n = 1234
            seed = 77
            step_size = 0.01
            iterations = 42
            v_max = 12.5
            net_widths = 32,16
            out = /tmp/somewhere
            plots = false

            [outer]
            latent_dim = 3
            rounds = 7
            gen_lr = 0.002
        ";
        let cfg = RunConfig::parse(text).unwrap();
        let round = RunConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(cfg, round);
        // And once more through the default config.
        let base = RunConfig::default();
        assert_eq!(RunConfig::parse(&base.serialize()).unwrap(), base);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected_with_lines() {
        let err = RunConfig::parse("bogus_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
        assert!(err.to_string().contains("line 1"));

        let err = RunConfig::parse("n = 5\nn = 6\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"));
        assert!(err.to_string().contains("line 2"));

        let err = RunConfig::parse("[outer]\nwhatever = 3\n").unwrap_err();
        assert!(err.to_string().contains("whatever"));

        let err = RunConfig::parse("[inner]\n").unwrap_err();
        assert!(err.to_string().contains("unknown section"));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# a comment\n\nn = 10 # trailing\n").unwrap();
        assert_eq!(cfg.n, 10);
    }

    #[test]
    fn outer_latent_count_follows_n_when_unset() {
        let cfg = RunConfig::parse("n = 500\n[outer]\nrounds = 2\n").unwrap();
        assert_eq!(cfg.outer.as_ref().unwrap().cfg.latent_count, 500);
        let cfg = RunConfig::parse("n = 500\n[outer]\nlatent_count = 99\n").unwrap();
        assert_eq!(cfg.outer.as_ref().unwrap().cfg.latent_count, 99);
    }

    #[test]
    fn validation_catches_bad_combinations() {
        let mut cfg = RunConfig::default();
        cfg.n = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.flow.batch_size = cfg.n + 1;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.dataset_noise = Some(0.2);
        cfg.dataset = DatasetId::FourSquares; // no noise knob
        assert!(cfg.validate().is_err());

        // iterations = 0 is allowed (no-op flow) when no outer block is set.
        let mut cfg = RunConfig::default();
        cfg.flow.iterations = 0;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn bad_values_name_the_key() {
        for (text, needle) in [
            ("estimator = bogus\n", "estimator"),
            ("n = -3\n", "n wants"),
            ("plots = yes\n", "plots wants"),
            ("net_widths = 64,0\n", "widths"),
            ("step_size = fast\n", "step_size wants"),
        ] {
            let err = RunConfig::parse(text).unwrap_err().to_string();
            assert!(err.contains(needle), "'{}' missing '{}'", err, needle);
        }
    }
}
