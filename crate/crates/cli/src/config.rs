//! Key=value run configuration. Unknown keys are rejected; every command
//! writes the fully resolved configuration beside its outputs so any run
//! is reproducible from that file plus the seed.

use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub encoder_seed: u64,
    pub resolution: usize,

    // generator architecture
    pub d: usize,
    pub chunks: usize,
    pub blocks: usize,
    pub heads: usize,
    pub k_max: usize,
    pub ffn_mult: usize,
    pub lambda_id: f64,

    // generator training
    pub gen_steps: usize,
    pub gen_lr: f64,
    pub gen_wd: f64,
    pub gen_batch: usize,
    pub gen_patches: usize,

    // task / splits
    pub n_patches: usize,
    pub n_train_bags: usize,
    pub n_val_bags: usize,
    pub n_test_bags: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub bag_threshold: f64,

    // MIL training
    pub mil_lr: f64,
    pub mil_wd: f64,
    pub grad_accum: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub p_aug: f64,
    pub noise_sigma: f64,

    // evaluation
    pub eval_patches: usize,
    pub mem_budget: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out_dir: PathBuf::from("out"),
            encoder_seed: 42,
            resolution: 32,
            d: 128,
            chunks: 4,
            blocks: 4,
            heads: 4,
            k_max: 4,
            ffn_mult: 4,
            lambda_id: 1.0,
            gen_steps: 3000,
            gen_lr: 1e-4,
            gen_wd: 1e-5,
            gen_batch: 64,
            gen_patches: 512,
            n_patches: 2000,
            n_train_bags: 100,
            n_val_bags: 30,
            n_test_bags: 30,
            m_min: 20,
            m_max: 200,
            bag_threshold: 0.15,
            mil_lr: 1e-4,
            mil_wd: 1e-5,
            grad_accum: 4,
            patience: 30,
            max_epochs: 200,
            p_aug: 0.75,
            noise_sigma: 0.05,
            eval_patches: 500,
            mem_budget: 1 << 30,
        }
    }
}

macro_rules! config_keys {
    ($self:ident, $each:ident) => {
        $each!(seed, $self.seed);
        $each!(out_dir, $self.out_dir);
        $each!(encoder_seed, $self.encoder_seed);
        $each!(resolution, $self.resolution);
        $each!(d, $self.d);
        $each!(chunks, $self.chunks);
        $each!(blocks, $self.blocks);
        $each!(heads, $self.heads);
        $each!(k_max, $self.k_max);
        $each!(ffn_mult, $self.ffn_mult);
        $each!(lambda_id, $self.lambda_id);
        $each!(gen_steps, $self.gen_steps);
        $each!(gen_lr, $self.gen_lr);
        $each!(gen_wd, $self.gen_wd);
        $each!(gen_batch, $self.gen_batch);
        $each!(gen_patches, $self.gen_patches);
        $each!(n_patches, $self.n_patches);
        $each!(n_train_bags, $self.n_train_bags);
        $each!(n_val_bags, $self.n_val_bags);
        $each!(n_test_bags, $self.n_test_bags);
        $each!(m_min, $self.m_min);
        $each!(m_max, $self.m_max);
        $each!(bag_threshold, $self.bag_threshold);
        $each!(mil_lr, $self.mil_lr);
        $each!(mil_wd, $self.mil_wd);
        $each!(grad_accum, $self.grad_accum);
        $each!(patience, $self.patience);
        $each!(max_epochs, $self.max_epochs);
        $each!(p_aug, $self.p_aug);
        $each!(noise_sigma, $self.noise_sigma);
        $each!(eval_patches, $self.eval_patches);
        $each!(mem_budget, $self.mem_budget);
    };
}

impl RunConfig {
    /// Parse `key = value` lines (# comments allowed) over the defaults.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = RunConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value, got {raw:?}", ln + 1))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value).map_err(|e| format!("line {}: {e}", ln + 1))?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse_into<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("invalid value {value:?} for key {key:?}"))
        }
        macro_rules! try_set {
            ($name:ident, $field:expr) => {
                if key == stringify!($name) {
                    $field = parse_into(key, value)?;
                    return Ok(());
                }
            };
        }
        config_keys!(self, try_set);
        Err(format!("unknown configuration key {key:?}"))
    }

    /// All keys with their effective values, one per line.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        macro_rules! render {
            ($name:ident, $field:expr) => {
                writeln!(out, "{} = {}", stringify!($name), display_value(&$field)).unwrap();
            };
        }
        config_keys!(self, render);
        out
    }

    /// FNV-1a hash of the resolved configuration, as a short hex tag that
    /// ties results rows and reports back to their exact settings.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.resolved().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

trait DisplayValue {
    fn render(&self) -> String;
}

impl DisplayValue for u64 {
    fn render(&self) -> String {
        self.to_string()
    }
}

impl DisplayValue for usize {
    fn render(&self) -> String {
        self.to_string()
    }
}

impl DisplayValue for f64 {
    fn render(&self) -> String {
        // Full-precision so resolved files reproduce the exact run.
        format!("{self:.16e}")
    }
}

impl DisplayValue for PathBuf {
    fn render(&self) -> String {
        self.display().to_string()
    }
}

fn display_value<T: DisplayValue>(v: &T) -> String {
    v.render()
}
