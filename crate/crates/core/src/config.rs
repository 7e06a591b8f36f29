//! Model configuration: the full hyperparameter record and its line-oriented
//! `key=value` text format.

use std::fmt;

use crate::block::default_dilations;

/// Decoder variant: the attention decoder or plain bilinear upsampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    Meu,
    Bilinear,
}

/// Full hyperparameter record driving building, analysis and ablations.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Stride-1 block count in stage 2.
    pub p: usize,
    /// Stride-1 block count in stage 3.
    pub q: usize,
    pub branches: usize,
    pub dilations: Vec<usize>,
    pub stage_channels: (usize, usize, usize),
    pub inter_branch_add: bool,
    pub long_skip: bool,
    pub meu_channel_attention: bool,
    pub meu_spatial_attention: bool,
    pub decoder: DecoderKind,
    /// (h, w)
    pub input_size: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 19,
            p: 3,
            q: 9,
            branches: 4,
            dilations: default_dilations(4),
            stage_channels: (16, 32, 64),
            inter_branch_add: true,
            long_skip: true,
            meu_channel_attention: true,
            meu_spatial_attention: true,
            decoder: DecoderKind::Meu,
            input_size: (1024, 512),
        }
    }
}

/// Parse or constraint failure; syntax errors carry their line number.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        ConfigError { line: Some(line), message: message.into() }
    }

    fn rule(message: impl Into<String>) -> Self {
        ConfigError { line: None, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "config line {line}: {}", self.message),
            None => write!(f, "config: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn parse_usize(line: usize, key: &str, value: &str) -> Result<usize, ConfigError> {
    value
        .parse::<usize>()
        .map_err(|_| ConfigError::at(line, format!("{key}: expected a non-negative integer, got '{value}'")))
}

fn parse_toggle(line: usize, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(ConfigError::at(line, format!("{key}: expected on/off, got '{value}'"))),
    }
}

fn parse_list(line: usize, key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value
        .split(',')
        .map(|v| parse_usize(line, key, v.trim()))
        .collect()
}

/// Parse an `HxW` size with a literal 'x'.
pub fn parse_size(value: &str) -> Option<(usize, usize)> {
    let (h, w) = value.split_once('x')?;
    Some((h.trim().parse().ok()?, w.trim().parse().ok()?))
}

impl ModelConfig {
    /// Parse the line-oriented key=value format. Omitted keys take the
    /// documented defaults; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ModelConfig::default();
        let mut dilations_set = false;

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| ConfigError::at(line, format!("expected key=value, got '{content}'")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "p" => cfg.p = parse_usize(line, key, value)?,
                "q" => cfg.q = parse_usize(line, key, value)?,
                "classes" => cfg.num_classes = parse_usize(line, key, value)?,
                "branches" => cfg.branches = parse_usize(line, key, value)?,
                "dilations" => {
                    cfg.dilations = parse_list(line, key, value)?;
                    dilations_set = true;
                }
                "channels" => {
                    let list = parse_list(line, key, value)?;
                    if list.len() != 3 {
                        return Err(ConfigError::at(line, "channels: expected three comma-separated values"));
                    }
                    cfg.stage_channels = (list[0], list[1], list[2]);
                }
                "input" => {
                    cfg.input_size = parse_size(value)
                        .ok_or_else(|| ConfigError::at(line, format!("input: expected HxW, got '{value}'")))?;
                }
                "add" => cfg.inter_branch_add = parse_toggle(line, key, value)?,
                "longskip" => cfg.long_skip = parse_toggle(line, key, value)?,
                "ca" => cfg.meu_channel_attention = parse_toggle(line, key, value)?,
                "sa" => cfg.meu_spatial_attention = parse_toggle(line, key, value)?,
                "decoder" => {
                    cfg.decoder = match value {
                        "meu" => DecoderKind::Meu,
                        "bilinear" => DecoderKind::Bilinear,
                        _ => {
                            return Err(ConfigError::at(
                                line,
                                format!("decoder: expected meu or bilinear, got '{value}'"),
                            ))
                        }
                    };
                }
                _ => return Err(ConfigError::at(line, format!("unknown key '{key}'"))),
            }
        }

        if !dilations_set {
            cfg.dilations = default_dilations(cfg.branches.clamp(1, 4));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(ConfigError::rule(format!(
                "input size {h}x{w} must be divisible by 8 (total downsampling rate is 8)"
            )));
        }
        if self.p < 1 || self.q < 1 {
            return Err(ConfigError::rule(format!("p and q must be at least 1 (got p={}, q={})", self.p, self.q)));
        }
        if self.num_classes == 0 {
            return Err(ConfigError::rule("classes must be at least 1"));
        }
        if !matches!(self.branches, 1 | 2 | 4) {
            return Err(ConfigError::rule(format!("branches must be 1, 2 or 4 (got {})", self.branches)));
        }
        if self.dilations.len() != self.branches {
            return Err(ConfigError::rule(format!(
                "{} dilation rates given for {} branches",
                self.dilations.len(),
                self.branches
            )));
        }
        if self.dilations.iter().any(|&d| d == 0)
            || self.dilations.windows(2).any(|p| p[0] >= p[1])
        {
            return Err(ConfigError::rule("dilations must be positive and strictly increasing"));
        }
        let (c1, c2, c3) = self.stage_channels;
        if c1 == 0 || c2 == 0 || c3 == 0 {
            return Err(ConfigError::rule("stage channels must be positive"));
        }
        for (stage, c) in [("stage2", c1), ("stage2", c2), ("stage3", c2), ("stage3", c3)] {
            if (4 * c) % self.branches != 0 {
                return Err(ConfigError::rule(format!(
                    "{stage}: expanded channel count {} not divisible by {} branches",
                    4 * c,
                    self.branches
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn final_architecture_line() {
        let cfg = ModelConfig::parse("p=3\nq=9\nclasses=19\ninput=1024x512").unwrap();
        assert_eq!(cfg.p, 3);
        assert_eq!(cfg.q, 9);
        assert_eq!(cfg.num_classes, 19);
        assert_eq!(cfg.input_size, (1024, 512));
        assert_eq!(cfg, ModelConfig::default());
    }

    #[test]
    fn empty_text_yields_defaults() {
        let cfg = ModelConfig::parse("").unwrap();
        assert_eq!(cfg.p, 3);
        assert_eq!(cfg.q, 9);
        assert_eq!(cfg.branches, 4);
        assert_eq!(cfg.dilations, vec![1, 2, 4, 8]);
        assert!(cfg.inter_branch_add && cfg.long_skip);
        assert!(cfg.meu_channel_attention && cfg.meu_spatial_attention);
        assert_eq!(cfg.decoder, DecoderKind::Meu);
    }

    #[test]
    fn rejects_indivisible_input() {
        let err = ModelConfig::parse("input=1000x500").unwrap_err();
        assert!(err.message.contains("divisible by 8"), "{err}");
    }

    #[test]
    fn rejects_unknown_key_with_line_number() {
        let err = ModelConfig::parse("p=3\nbogus=1").unwrap_err();
        assert_eq!(err.line, Some(2));
        assert!(err.message.contains("bogus"));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = ModelConfig::parse("# full model\n\np=5  # deeper stage 2\nq = 7\n").unwrap();
        assert_eq!((cfg.p, cfg.q), (5, 7));
    }

    #[test]
    fn branch_count_picks_dilation_prefix() {
        let cfg = ModelConfig::parse("branches=2").unwrap();
        assert_eq!(cfg.dilations, vec![1, 2]);
        let cfg = ModelConfig::parse("branches=1").unwrap();
        assert_eq!(cfg.dilations, vec![1]);
    }

    #[test]
    fn rejects_branch_dilation_mismatch() {
        assert!(ModelConfig::parse("branches=2\ndilations=1,2,4,8").is_err());
        assert!(ModelConfig::parse("branches=3").is_err());
        assert!(ModelConfig::parse("dilations=1,2,4,4").is_err());
    }

    #[test]
    fn toggles_parse() {
        let cfg = ModelConfig::parse("add=off\nlongskip=off\nca=off\nsa=on\ndecoder=bilinear").unwrap();
        assert!(!cfg.inter_branch_add);
        assert!(!cfg.long_skip);
        assert!(!cfg.meu_channel_attention);
        assert!(cfg.meu_spatial_attention);
        assert_eq!(cfg.decoder, DecoderKind::Bilinear);
        assert!(ModelConfig::parse("add=wat").is_err());
    }
}
