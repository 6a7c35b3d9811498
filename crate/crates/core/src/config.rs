//! `key = value` text configuration shared by scene specs, model and
//! training settings. Blank lines and `#` comments are ignored; unknown keys
//! are errors.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;

/// A settings struct addressable by key.
pub trait KeyValue {
    /// Applies one setting. Returns `Ok(false)` when the key is not one of
    /// this struct's keys.
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool>;
}

/// Splits text into `(key, value)` pairs in order of appearance.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_pairs(&text)
}

/// Parses one value, naming the key on failure.
pub fn value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("bad value {v:?} for {key}: {e}")))
}

/// Parses `a..b` or `a,b` ranges; a single number gives `(a, a)`.
pub fn range<T: FromStr + Copy>(key: &str, v: &str) -> Result<(T, T)>
where
    T::Err: Display,
{
    match v.split_once("..").or_else(|| v.split_once(',')) {
        Some((a, b)) => Ok((value(key, a.trim())?, value(key, b.trim())?)),
        None => {
            let x = value(key, v)?;
            Ok((x, x))
        }
    }
}

/// Parses `HxW` (e.g. `100x200`) into `(H, W)`.
pub fn dims2(key: &str, v: &str) -> Result<(usize, usize)> {
    let (a, b) = v
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("{key}: expected HxW, got {v:?}")))?;
    Ok((value(key, a.trim())?, value(key, b.trim())?))
}

/// Applies pairs to a list of sections; every key must be claimed by one.
pub fn apply_pairs(pairs: &[(String, String)], sections: &mut [&mut dyn KeyValue]) -> Result<()> {
    for (k, v) in pairs {
        let mut claimed = false;
        for s in sections.iter_mut() {
            if s.set_key(k, v)? {
                claimed = true;
                break;
            }
        }
        if !claimed {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
    }
    Ok(())
}

impl KeyValue for FusionConfig {
    fn set_key(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "height" => self.height = value(key, v)?,
            "width" => self.width = value(key, v)?,
            "channels" => self.channels = value(key, v)?,
            "patch" => self.patch = value(key, v)?,
            "c_h" => self.c_h = value(key, v)?,
            "heads" => self.heads = value(key, v)?,
            "blocks" => self.blocks = value(key, v)?,
            "d_meters" => self.d_meters = value(key, v)?,
            "mask_mode" => self.mask_mode = value(key, v)?,
            "seg_threshold" => self.seg_threshold = value(key, v)?,
            "scale_scores" => self.scale_scores = value(key, v)?,
            "sat_residual" => self.sat_residual = value(key, v)?,
            "offset_hidden" => self.offset_hidden = value(key, v)?,
            "offset_layers" => self.offset_layers = value(key, v)?,
            "offset_limit" => {
                self.offset_limit = match v.trim() {
                    "off" | "none" => None,
                    x => Some(value(key, x)?),
                }
            }
            "head_hidden" => self.head_hidden = value(key, v)?,
            "enc_hidden" => self.enc_hidden = value(key, v)?,
            "classes" => self.classes = value(key, v)?,
            "fusion" => self.fusion = value(key, v)?,
            "bev_align" => self.bev_align = parse_switch(key, v)?,
            "extent_m" => {
                let (a, b) = range::<f64>(key, v)?;
                self.extent_m = (a, b);
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// `true|false|on|off`.
pub fn parse_switch(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" => Ok(true),
        "false" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false/on/off, got {v:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{FusionMode, MaskMode};

    #[test]
    fn parses_comments_and_rejects_unknown() {
        let pairs =
            parse_pairs("# model\npatch = 5\n\nmask_mode=soft # ablation\nfusion = concat\nbev_align = off\n").unwrap();
        let mut cfg = FusionConfig::desk_scale();
        apply_pairs(&pairs, &mut [&mut cfg]).unwrap();
        assert_eq!(cfg.patch, 5);
        assert_eq!(cfg.mask_mode, MaskMode::Soft);
        assert_eq!(cfg.fusion, FusionMode::Concat);
        assert!(!cfg.bev_align);

        let bad = parse_pairs("pach = 5").unwrap();
        assert!(apply_pairs(&bad, &mut [&mut cfg]).is_err());
        assert!(parse_pairs("just words").is_err());
        assert!(apply_pairs(&parse_pairs("heads = many").unwrap(), &mut [&mut cfg]).is_err());
    }

    #[test]
    fn ranges_and_dims() {
        assert_eq!(range::<usize>("k", "1..3").unwrap(), (1, 3));
        assert_eq!(range::<f64>("k", "0.5, 2").unwrap(), (0.5, 2.0));
        assert_eq!(range::<usize>("k", "4").unwrap(), (4, 4));
        assert_eq!(dims2("res", "100x200").unwrap(), (100, 200));
        assert!(dims2("res", "100").is_err());
    }
}
