//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, unknown or duplicate keys
//! are rejected. A single file covers the architecture, training loop,
//! dataset generation, and baseline solver knobs.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{NetworkConfig, Variant};
use crate::ssm::BbarMode;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Square image extent (H = W = size).
    pub size: usize,
    pub patch: usize,
    pub depth: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub ncoils: usize,
    pub variant: Variant,
    pub bbar_mode: BbarMode,
    pub net_seed: u64,

    pub iters: u64,
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// None = automatic (5% of iters).
    pub warmup_iters: Option<u64>,
    pub weight_decay: f64,
    pub train_seed: u64,
    pub log_every: u64,

    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Acceleration factors generated and evaluated.
    pub r_list: Vec<u32>,
    pub calib: usize,
    /// None = automatic per acceleration factor.
    pub sigma_frac: Option<f64>,
    pub mask_seed: u64,
    pub coil_seed: u64,
    pub phantom_seed: u64,
    pub ellipses_min: usize,
    pub ellipses_max: usize,

    pub cg_lambda: f64,
    pub cg_iters: usize,
    pub cg_tol: f64,
}

impl Default for RunConfig {
    /// Desk-scale defaults: small enough to train on a laptop CPU in
    /// minutes while exercising every component.
    fn default() -> Self {
        RunConfig {
            size: 64,
            patch: 2,
            depth: 3,
            d_model: 32,
            d_state: 16,
            expand: 2,
            ncoils: 4,
            variant: Variant::Mamba,
            bbar_mode: BbarMode::ZohFull,
            net_seed: 100,
            iters: 2000,
            batch: 4,
            lr_max: 1e-3,
            lr_min: 1e-6,
            warmup_iters: None,
            weight_decay: 0.01,
            train_seed: 0,
            log_every: 50,
            n_train: 32,
            n_val: 4,
            n_test: 8,
            r_list: vec![4],
            calib: 8,
            sigma_frac: None,
            mask_seed: 1000,
            coil_seed: 2000,
            phantom_seed: 3000,
            ellipses_min: 4,
            ellipses_max: 9,
            cg_lambda: 0.01,
            cg_iters: 50,
            cg_tol: 1e-9,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::config(format!("key '{key}': cannot parse '{value}'")))
}

impl RunConfig {
    pub fn warmup(&self) -> u64 {
        self.warmup_iters.unwrap_or(self.iters / 20)
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            h: self.size,
            w: self.size,
            depth: self.depth,
            d_model: self.d_model,
            d_state: self.d_state,
            patch: self.patch,
            expand: self.expand,
            ncoils: self.ncoils,
            variant: self.variant,
            bbar_mode: self.bbar_mode,
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen: HashSet<String> = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("duplicate key '{key}'")));
            }
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "size" => self.size = parse_num(key, value)?,
            "patch" => self.patch = parse_num(key, value)?,
            "depth" => self.depth = parse_num(key, value)?,
            "d_model" => self.d_model = parse_num(key, value)?,
            "d_state" => self.d_state = parse_num(key, value)?,
            "expand" => self.expand = parse_num(key, value)?,
            "ncoils" => self.ncoils = parse_num(key, value)?,
            "variant" => self.variant = Variant::parse(value)?,
            "bbar_mode" => {
                self.bbar_mode = BbarMode::parse(value).ok_or_else(|| {
                    Error::config(format!("unknown bbar_mode '{value}' (zoh_full | euler_b)"))
                })?
            }
            "net_seed" => self.net_seed = parse_num(key, value)?,
            "iters" => self.iters = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "lr_max" => self.lr_max = parse_num(key, value)?,
            "lr_min" => self.lr_min = parse_num(key, value)?,
            "warmup_iters" => {
                self.warmup_iters = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "train_seed" => self.train_seed = parse_num(key, value)?,
            "log_every" => self.log_every = parse_num(key, value)?,
            "n_train" => self.n_train = parse_num(key, value)?,
            "n_val" => self.n_val = parse_num(key, value)?,
            "n_test" => self.n_test = parse_num(key, value)?,
            "r_list" => {
                let rs: Result<Vec<u32>> = value
                    .split(',')
                    .map(|s| parse_num::<u32>(key, s.trim()))
                    .collect();
                self.r_list = rs?;
            }
            "calib" => self.calib = parse_num(key, value)?,
            "sigma_frac" => {
                self.sigma_frac = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "mask_seed" => self.mask_seed = parse_num(key, value)?,
            "coil_seed" => self.coil_seed = parse_num(key, value)?,
            "phantom_seed" => self.phantom_seed = parse_num(key, value)?,
            "ellipses_min" => self.ellipses_min = parse_num(key, value)?,
            "ellipses_max" => self.ellipses_max = parse_num(key, value)?,
            "cg_lambda" => self.cg_lambda = parse_num(key, value)?,
            "cg_iters" => self.cg_iters = parse_num(key, value)?,
            "cg_tol" => self.cg_tol = parse_num(key, value)?,
            other => return Err(Error::config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.network().validate()?;
        if self.lr_min >= self.lr_max {
            return Err(Error::config("lr_min must be below lr_max"));
        }
        if self.warmup() >= self.iters {
            return Err(Error::config("warmup_iters must be below iters"));
        }
        if self.batch == 0 || self.log_every == 0 {
            return Err(Error::config("batch and log_every must be >= 1"));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::config("split sizes must be >= 1"));
        }
        if self.r_list.is_empty() {
            return Err(Error::config("r_list must not be empty"));
        }
        if self.ellipses_min == 0 || self.ellipses_max < self.ellipses_min {
            return Err(Error::config("need 1 <= ellipses_min <= ellipses_max"));
        }
        Ok(())
    }

    /// Canonical serialization; `from_text` of the result reproduces the
    /// config exactly. Stored inside checkpoints.
    pub fn to_text(&self) -> String {
        let opt_u64 = |v: Option<u64>| v.map_or("auto".into(), |x| x.to_string());
        let opt_f64 = |v: Option<f64>| v.map_or("auto".into(), |x| format!("{x:e}"));
        let rs: Vec<String> = self.r_list.iter().map(u32::to_string).collect();
        format!(
            "size = {}\npatch = {}\ndepth = {}\nd_model = {}\nd_state = {}\nexpand = {}\n\
             ncoils = {}\nvariant = {}\nbbar_mode = {}\nnet_seed = {}\niters = {}\nbatch = {}\n\
             lr_max = {:e}\nlr_min = {:e}\nwarmup_iters = {}\nweight_decay = {:e}\n\
             train_seed = {}\nlog_every = {}\nn_train = {}\nn_val = {}\nn_test = {}\n\
             r_list = {}\ncalib = {}\nsigma_frac = {}\nmask_seed = {}\ncoil_seed = {}\n\
             phantom_seed = {}\nellipses_min = {}\nellipses_max = {}\ncg_lambda = {:e}\n\
             cg_iters = {}\ncg_tol = {:e}\n",
            self.size,
            self.patch,
            self.depth,
            self.d_model,
            self.d_state,
            self.expand,
            self.ncoils,
            self.variant.name(),
            self.bbar_mode.name(),
            self.net_seed,
            self.iters,
            self.batch,
            self.lr_max,
            self.lr_min,
            opt_u64(self.warmup_iters),
            self.weight_decay,
            self.train_seed,
            self.log_every,
            self.n_train,
            self.n_val,
            self.n_test,
            rs.join(","),
            self.calib,
            opt_f64(self.sigma_frac),
            self.mask_seed,
            self.coil_seed,
            self.phantom_seed,
            self.ellipses_min,
            self.ellipses_max,
            self.cg_lambda,
            self.cg_iters,
            self.cg_tol,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn test_parse_overrides_and_comments() {
        let cfg = RunConfig::from_text(
            "# experiment\nsize = 32\ndepth = 2   # shallow\n\nr_list = 4, 8\nvariant = only_dc\n",
        )
        .unwrap();
        assert_eq!(cfg.size, 32);
        assert_eq!(cfg.depth, 2);
        assert_eq!(cfg.r_list, vec![4, 8]);
        assert_eq!(cfg.variant, Variant::OnlyDc);
    }

    #[test]
    fn test_unknown_key_rejected() {
        let err = RunConfig::from_text("sizee = 64\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn test_duplicate_key_rejected() {
        assert!(RunConfig::from_text("size = 64\nsize = 32\n").is_err());
    }

    #[test]
    fn test_bad_value_is_error_not_panic() {
        assert!(RunConfig::from_text("depth = banana\n").is_err());
        assert!(RunConfig::from_text("just some words\n").is_err());
    }

    #[test]
    fn test_roundtrip_through_text() {
        let mut cfg = RunConfig::default();
        cfg.size = 32;
        cfg.r_list = vec![4, 8];
        cfg.sigma_frac = Some(0.12);
        cfg.warmup_iters = Some(77);
        cfg.variant = Variant::OnlyDc;
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn test_validation_catches_bad_combinations() {
        assert!(RunConfig::from_text("lr_max = 1e-7\n").is_err());
        assert!(RunConfig::from_text("iters = 10\nwarmup_iters = 20\n").is_err());
        assert!(RunConfig::from_text("size = 48\n").is_err());
    }
}
