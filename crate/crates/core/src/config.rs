//! Run configuration: a flat `key = value` text format over explicit
//! defaults. Unknown keys are rejected, values are validated before any
//! compute, and `echo` emits the effective configuration in a form that
//! parses back to the identical struct.

use std::path::Path;

use crate::data::{SyntheticWorldSpec, Vocab};
use crate::model::{ModelGeometry, Stage, StagePlan, TrainConfig, Variant};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    // model geometry
    pub d: usize,
    pub heads: usize,
    pub pdq_blocks: usize,
    pub text_blocks: usize,
    pub d_ff: usize,
    pub d_img: usize,
    pub d_raw: usize,
    pub l_i: usize,
    pub l_p: usize,
    pub d_e: usize,
    pub max_len: usize,
    // synthetic world
    pub ambiguity: f64,
    pub noise: f64,
    pub entity_count: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub n_label: usize,
    pub n_desc: usize,
    // training
    pub batch_size: usize,
    pub pretrain1_lambda_itm: f64,
    pub pretrain1_lambda_itc: f64,
    pub pretrain1_lambda_epe: f64,
    pub pretrain1_lr: f64,
    pub pretrain1_epochs: usize,
    pub pretrain2_lambda_itm: f64,
    pub pretrain2_lambda_itc: f64,
    pub pretrain2_lambda_epe: f64,
    pub pretrain2_lr: f64,
    pub pretrain2_epochs: usize,
    pub finetune_lambda_itm: f64,
    pub finetune_lambda_itc: f64,
    pub finetune_lambda_epe: f64,
    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    // io
    pub data_dir: String,
    pub out_dir: String,
    pub dump_pgm: bool,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        let p1 = TrainConfig::for_stage(Stage::Pretrain1);
        let p2 = TrainConfig::for_stage(Stage::Pretrain2);
        let ft = TrainConfig::for_stage(Stage::Finetune);
        let world = SyntheticWorldSpec::default();
        RunConfig {
            variant: Variant::Full,
            seed: 0,
            d: 24,
            heads: 2,
            pdq_blocks: 1,
            text_blocks: 2,
            d_ff: 48,
            d_img: 16,
            d_raw: world.d_raw,
            l_i: world.l_i,
            l_p: 8,
            d_e: 24,
            max_len: 64,
            ambiguity: world.ambiguity,
            noise: world.noise,
            entity_count: world.entity_count,
            n_train: 2000,
            n_dev: 500,
            n_test: 500,
            n_label: 3000,
            n_desc: 3000,
            batch_size: 2,
            pretrain1_lambda_itm: p1.lambda_itm,
            pretrain1_lambda_itc: p1.lambda_itc,
            pretrain1_lambda_epe: p1.lambda_epe,
            pretrain1_lr: p1.lr,
            pretrain1_epochs: p1.epochs,
            pretrain2_lambda_itm: p2.lambda_itm,
            pretrain2_lambda_itc: p2.lambda_itc,
            pretrain2_lambda_epe: p2.lambda_epe,
            pretrain2_lr: p2.lr,
            pretrain2_epochs: p2.epochs,
            finetune_lambda_itm: ft.lambda_itm,
            finetune_lambda_itc: ft.lambda_itc,
            finetune_lambda_epe: ft.lambda_epe,
            finetune_lr: ft.lr,
            finetune_epochs: ft.epochs,
            data_dir: "data".into(),
            out_dir: "out".into(),
            dump_pgm: false,
        }
    }
}

fn p_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::config(key, format!("expected a nonnegative integer, got `{v}`")))
}

fn p_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| Error::config(key, format!("expected a nonnegative integer, got `{v}`")))
}

fn p_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::config(key, format!("expected a number, got `{v}`")))
}

fn p_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{v}`"))),
    }
}

impl RunConfig {
    /// Assigns one key. Unknown keys and malformed values are rejected with
    /// the key named in the error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => {
                self.variant = Variant::parse(value).ok_or_else(|| {
                    Error::config(key, format!("expected full|no-pdq|no-epe|psa, got `{value}`"))
                })?;
            }
            "seed" => self.seed = p_u64(key, value)?,
            "d" => self.d = p_usize(key, value)?,
            "heads" => self.heads = p_usize(key, value)?,
            "pdq_blocks" => self.pdq_blocks = p_usize(key, value)?,
            "text_blocks" => self.text_blocks = p_usize(key, value)?,
            "d_ff" => self.d_ff = p_usize(key, value)?,
            "d_img" => self.d_img = p_usize(key, value)?,
            "d_raw" => self.d_raw = p_usize(key, value)?,
            "l_i" => self.l_i = p_usize(key, value)?,
            "l_p" => self.l_p = p_usize(key, value)?,
            "d_e" => self.d_e = p_usize(key, value)?,
            "max_len" => self.max_len = p_usize(key, value)?,
            "ambiguity" => self.ambiguity = p_f64(key, value)?,
            "noise" => self.noise = p_f64(key, value)?,
            "entity_count" => self.entity_count = p_usize(key, value)?,
            "n_train" => self.n_train = p_usize(key, value)?,
            "n_dev" => self.n_dev = p_usize(key, value)?,
            "n_test" => self.n_test = p_usize(key, value)?,
            "n_label" => self.n_label = p_usize(key, value)?,
            "n_desc" => self.n_desc = p_usize(key, value)?,
            "batch_size" => self.batch_size = p_usize(key, value)?,
            "pretrain1_lambda_itm" => self.pretrain1_lambda_itm = p_f64(key, value)?,
            "pretrain1_lambda_itc" => self.pretrain1_lambda_itc = p_f64(key, value)?,
            "pretrain1_lambda_epe" => self.pretrain1_lambda_epe = p_f64(key, value)?,
            "pretrain1_lr" => self.pretrain1_lr = p_f64(key, value)?,
            "pretrain1_epochs" => self.pretrain1_epochs = p_usize(key, value)?,
            "pretrain2_lambda_itm" => self.pretrain2_lambda_itm = p_f64(key, value)?,
            "pretrain2_lambda_itc" => self.pretrain2_lambda_itc = p_f64(key, value)?,
            "pretrain2_lambda_epe" => self.pretrain2_lambda_epe = p_f64(key, value)?,
            "pretrain2_lr" => self.pretrain2_lr = p_f64(key, value)?,
            "pretrain2_epochs" => self.pretrain2_epochs = p_usize(key, value)?,
            "finetune_lambda_itm" => self.finetune_lambda_itm = p_f64(key, value)?,
            "finetune_lambda_itc" => self.finetune_lambda_itc = p_f64(key, value)?,
            "finetune_lambda_epe" => self.finetune_lambda_epe = p_f64(key, value)?,
            "finetune_lr" => self.finetune_lr = p_f64(key, value)?,
            "finetune_epochs" => self.finetune_epochs = p_usize(key, value)?,
            "data_dir" => self.data_dir = value.to_string(),
            "out_dir" => self.out_dir = value.to_string(),
            "dump_pgm" => self.dump_pgm = p_bool(key, value)?,
            _ => return Err(Error::config(key, "unknown configuration key")),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped.
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(line, "expected `key = value`")
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// The effective configuration as re-parsable `key = value` lines.
    pub fn echo(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("variant", self.variant.as_str().into());
        kv("seed", self.seed.to_string());
        kv("d", self.d.to_string());
        kv("heads", self.heads.to_string());
        kv("pdq_blocks", self.pdq_blocks.to_string());
        kv("text_blocks", self.text_blocks.to_string());
        kv("d_ff", self.d_ff.to_string());
        kv("d_img", self.d_img.to_string());
        kv("d_raw", self.d_raw.to_string());
        kv("l_i", self.l_i.to_string());
        kv("l_p", self.l_p.to_string());
        kv("d_e", self.d_e.to_string());
        kv("max_len", self.max_len.to_string());
        kv("ambiguity", format!("{}", self.ambiguity));
        kv("noise", format!("{}", self.noise));
        kv("entity_count", self.entity_count.to_string());
        kv("n_train", self.n_train.to_string());
        kv("n_dev", self.n_dev.to_string());
        kv("n_test", self.n_test.to_string());
        kv("n_label", self.n_label.to_string());
        kv("n_desc", self.n_desc.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("pretrain1_lambda_itm", format!("{}", self.pretrain1_lambda_itm));
        kv("pretrain1_lambda_itc", format!("{}", self.pretrain1_lambda_itc));
        kv("pretrain1_lambda_epe", format!("{}", self.pretrain1_lambda_epe));
        kv("pretrain1_lr", format!("{}", self.pretrain1_lr));
        kv("pretrain1_epochs", self.pretrain1_epochs.to_string());
        kv("pretrain2_lambda_itm", format!("{}", self.pretrain2_lambda_itm));
        kv("pretrain2_lambda_itc", format!("{}", self.pretrain2_lambda_itc));
        kv("pretrain2_lambda_epe", format!("{}", self.pretrain2_lambda_epe));
        kv("pretrain2_lr", format!("{}", self.pretrain2_lr));
        kv("pretrain2_epochs", self.pretrain2_epochs.to_string());
        kv("finetune_lambda_itm", format!("{}", self.finetune_lambda_itm));
        kv("finetune_lambda_itc", format!("{}", self.finetune_lambda_itc));
        kv("finetune_lambda_epe", format!("{}", self.finetune_lambda_epe));
        kv("finetune_lr", format!("{}", self.finetune_lr));
        kv("finetune_epochs", self.finetune_epochs.to_string());
        kv("data_dir", self.data_dir.clone());
        kv("out_dir", self.out_dir.clone());
        kv("dump_pgm", self.dump_pgm.to_string());
        s
    }

    pub fn geometry(&self) -> ModelGeometry {
        ModelGeometry {
            d: self.d,
            heads: self.heads,
            pdq_blocks: self.pdq_blocks,
            text_blocks: self.text_blocks,
            d_ff: self.d_ff,
            d_img: self.d_img,
            d_raw: self.d_raw,
            l_i: self.l_i,
            l_p: self.l_p,
            d_e: self.d_e,
            vocab_size: Vocab::standard().len(),
            max_len: self.max_len,
        }
    }

    pub fn world(&self) -> SyntheticWorldSpec {
        SyntheticWorldSpec {
            entity_count: self.entity_count,
            ambiguity: self.ambiguity,
            noise: self.noise,
            d_raw: self.d_raw,
            l_i: self.l_i,
            seed: self.seed,
        }
    }

    pub fn plan(&self) -> StagePlan {
        let mk = |stage, itm, itc, epe, lr, epochs| TrainConfig {
            stage,
            lambda_itm: itm,
            lambda_itc: itc,
            lambda_epe: epe,
            lr,
            epochs,
            batch_size: self.batch_size,
            seed: self.seed,
        };
        StagePlan {
            pretrain1: mk(
                Stage::Pretrain1,
                self.pretrain1_lambda_itm,
                self.pretrain1_lambda_itc,
                self.pretrain1_lambda_epe,
                self.pretrain1_lr,
                self.pretrain1_epochs,
            ),
            pretrain2: mk(
                Stage::Pretrain2,
                self.pretrain2_lambda_itm,
                self.pretrain2_lambda_itc,
                self.pretrain2_lambda_epe,
                self.pretrain2_lr,
                self.pretrain2_epochs,
            ),
            finetune: mk(
                Stage::Finetune,
                self.finetune_lambda_itm,
                self.finetune_lambda_itc,
                self.finetune_lambda_epe,
                self.finetune_lr,
                self.finetune_epochs,
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry().validate()?;
        self.world().validate()?;
        let plan = self.plan();
        for cfg in [&plan.pretrain1, &plan.pretrain2, &plan.finetune] {
            cfg.validate()?;
        }
        for (name, v) in [("n_train", self.n_train), ("n_dev", self.n_dev), ("n_test", self.n_test)]
        {
            if v == 0 {
                return Err(Error::config(name, "split must hold at least one scene"));
            }
        }
        Ok(())
    }
}
