//! Flat `key=value` configuration files: UTF-8 lines, `#` comments,
//! unknown or duplicate keys rejected. One file carries both the
//! architecture and the training hyperparameters; absent keys keep their
//! defaults.

use crate::blocks::AttentionNorm;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Every accepted key, used for the unknown-key error message.
pub const KNOWN_KEYS: &[&str] = &[
    "in_channels",
    "t_in",
    "t_out",
    "init_filters",
    "levels",
    "crop_factor",
    "lcam_groups",
    "lcam_dilation",
    "lcam_residual",
    "str_norm",
    "str_dense_attention",
    "str_residual_blocks",
    "dropout_rate",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "pos_weight",
    "alpha",
    "batch",
    "epochs",
    "plateau_factor",
    "threshold",
    "seed",
];

/// Parses a config file body against desk-scale defaults. Returns the
/// model and training configurations; both are validated.
pub fn parse_config(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let mut mc = ModelConfig::default();
    let mut tc = TrainConfig::desk();
    let mut seen = std::collections::HashSet::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("line {}: expected key=value", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::InvalidConfig(format!("duplicate key {key}")));
        }

        let us = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::InvalidConfig(format!("key {key}: bad integer {v}")))
        };
        let fl = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::InvalidConfig(format!("key {key}: bad number {v}")))
        };
        let bo = |v: &str| -> Result<bool> {
            match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(Error::InvalidConfig(format!("key {key}: bad bool {v}"))),
            }
        };

        match key {
            "in_channels" => mc.in_channels = us(value)?,
            "t_in" => mc.t_in = us(value)?,
            "t_out" => mc.t_out = us(value)?,
            "init_filters" => mc.init_filters = us(value)?,
            "levels" => mc.levels = us(value)?,
            "crop_factor" => mc.crop_factor = us(value)?,
            "lcam_groups" => mc.lcam_groups = us(value)?,
            "lcam_dilation" => mc.lcam_dilation = us(value)?,
            "lcam_residual" => mc.lcam_residual = bo(value)?,
            "str_norm" => {
                mc.str_cfg.attention_norm = match value {
                    "softmax_time" => AttentionNorm::SoftmaxTime,
                    "sigmoid_gate" => AttentionNorm::SigmoidGate,
                    "identity" => AttentionNorm::Identity,
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "key str_norm: unknown mode {other}"
                        )))
                    }
                }
            }
            "str_dense_attention" => mc.str_cfg.dense_attention = bo(value)?,
            "str_residual_blocks" => mc.str_cfg.residual_blocks = us(value)?,
            "dropout_rate" => mc.dropout_rate = fl(value)?,
            "lr" => tc.lr = fl(value)?,
            "weight_decay" => tc.weight_decay = fl(value)?,
            "beta1" => tc.beta1 = fl(value)?,
            "beta2" => tc.beta2 = fl(value)?,
            "eps" => tc.eps = fl(value)?,
            "pos_weight" => tc.pos_weight = fl(value)?,
            "alpha" => tc.alpha = fl(value)?,
            "batch" => tc.batch = us(value)?,
            "epochs" => tc.epochs = us(value)?,
            "plateau_factor" => tc.plateau_factor = fl(value)?,
            "threshold" => tc.threshold = fl(value)?,
            "seed" => tc.seed = us(value)? as u64,
            unknown => {
                return Err(Error::InvalidConfig(format!(
                    "unknown key {unknown} (known keys: {})",
                    KNOWN_KEYS.join(", ")
                )))
            }
        }
    }
    mc.validate()?;
    tc.validate()?;
    Ok((mc, tc))
}

/// Renders the resolved configuration as `key = value` lines (the
/// startup echo of the command-line tools).
pub fn render_config(mc: &ModelConfig, tc: &TrainConfig) -> String {
    let norm = match mc.str_cfg.attention_norm {
        AttentionNorm::SoftmaxTime => "softmax_time",
        AttentionNorm::SigmoidGate => "sigmoid_gate",
        AttentionNorm::Identity => "identity",
    };
    format!(
        "in_channels = {}\nt_in = {}\nt_out = {}\ninit_filters = {}\nlevels = {}\n\
         crop_factor = {}\nlcam_groups = {}\nlcam_dilation = {}\nlcam_residual = {}\n\
         str_norm = {}\nstr_dense_attention = {}\nstr_residual_blocks = {}\n\
         dropout_rate = {}\nlr = {}\nweight_decay = {}\nbeta1 = {}\nbeta2 = {}\n\
         eps = {}\npos_weight = {}\nalpha = {}\nbatch = {}\nepochs = {}\n\
         plateau_factor = {}\nthreshold = {}\nseed = {}\n",
        mc.in_channels,
        mc.t_in,
        mc.t_out,
        mc.init_filters,
        mc.levels,
        mc.crop_factor,
        mc.lcam_groups,
        mc.lcam_dilation,
        mc.lcam_residual,
        norm,
        mc.str_cfg.dense_attention,
        mc.str_cfg.residual_blocks,
        mc.dropout_rate,
        tc.lr,
        tc.weight_decay,
        tc.beta1,
        tc.beta2,
        tc.eps,
        tc.pos_weight,
        tc.alpha,
        tc.batch,
        tc.epochs,
        tc.plateau_factor,
        tc.threshold,
        tc.seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides_and_comments() {
        let text = "\
# architecture
init_filters = 16
levels = 2   # shallow
lr = 3e-4
seed = 42
";
        let (mc, tc) = parse_config(text).unwrap();
        assert_eq!(mc.init_filters, 16);
        assert_eq!(mc.levels, 2);
        assert_eq!(tc.lr, 3e-4);
        assert_eq!(tc.seed, 42);
        // untouched defaults
        assert_eq!(mc.in_channels, 11);
        assert_eq!(tc.batch, 4);
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let err = parse_config("learning_rate = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate"), "{msg}");
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(parse_config("levels = 2\nlevels = 3\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(parse_config("levels = zero\n").is_err());
        assert!(parse_config("t_out = 33\n").is_err()); // fold divisibility
        assert!(parse_config("threshold = 0.9\n").is_err()); // out of [0.5, 0.6]
    }

    #[test]
    fn round_trips_through_render() {
        let (mc, tc) = parse_config("init_filters = 16\nlcam_groups = 2\n").unwrap();
        let rendered = render_config(&mc, &tc);
        let (mc2, tc2) = parse_config(&rendered).unwrap();
        assert_eq!(mc2.init_filters, mc.init_filters);
        assert_eq!(mc2.lcam_groups, mc.lcam_groups);
        assert_eq!(tc2.lr, tc.lr);
        assert_eq!(tc2.batch, tc.batch);
    }
}
