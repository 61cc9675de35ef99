use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::MixerKind;
use crate::error::{Error, Result};
use crate::shift::ShiftVariant;

pub const STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub stage_depths: [usize; STAGES],
    /// `(frequency-mix blocks, receptance blocks)` per stage.
    pub fmix_split: [[usize; 2]; STAGES],
    pub shift: ShiftVariant,
    /// Hidden width multiplier of the channel mix.
    pub expansion: usize,
    pub in_channels: usize,
    pub global_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 48,
            stage_depths: [3, 4, 4, 6],
            fmix_split: [[0, 3], [0, 4], [0, 4], [6, 0]],
            shift: ShiftVariant::Cts,
            expansion: 4,
            in_channels: 3,
            global_residual: true,
        }
    }
}

impl ModelConfig {
    /// Small network for smoke tests and gradient checks.
    pub fn toy(base_channels: usize, stage_depths: [usize; STAGES]) -> Self {
        let mut fmix_split = [[0; 2]; STAGES];
        for (k, d) in stage_depths.iter().enumerate() {
            fmix_split[k] = if k == STAGES - 1 { [*d, 0] } else { [0, *d] };
        }
        Self {
            base_channels,
            stage_depths,
            fmix_split,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.expansion == 0 || self.in_channels == 0 {
            return Err(Error::Config(
                "base_channels, expansion and in_channels must be positive".into(),
            ));
        }
        for (k, (&[a, b], &depth)) in self.fmix_split.iter().zip(&self.stage_depths).enumerate() {
            if a + b != depth {
                return Err(Error::Config(format!(
                    "stage {}: split ({a}, {b}) does not add up to depth {depth}",
                    k + 1
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn stage_channels(&self, k: usize) -> usize {
        self.base_channels << k
    }

    /// Block kinds of stage `k`, frequency-mix blocks first.
    pub fn stage_kinds(&self, k: usize) -> Vec<MixerKind> {
        let [a, b] = self.fmix_split[k];
        let mut kinds = vec![MixerKind::Fmix; a];
        kinds.extend(std::iter::repeat_n(MixerKind::Crm, b));
        kinds
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ModelConfig::default();
        assert_eq!(ModelConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(ModelConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn bad_split_names_the_stage() {
        let err = ModelConfig::from_toml("fmix_split = [[0, 3], [1, 4], [0, 4], [6, 0]]").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("stage 2")), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ModelConfig::from_toml("base_chanels = 8").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.shift = ShiftVariant::Quad;
        assert_ne!(a.hash(), b.hash());
    }
}
