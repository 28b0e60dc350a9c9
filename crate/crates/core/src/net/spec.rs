use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::tensor::Shape;

/// Number of down-sampling units per encoder (and up-sampling layers in the decoder).
pub const LEVELS: usize = 5;
pub const FEATURE_CHANNELS: usize = 12;
pub const COLOR_CHANNELS: usize = 3;

/// Architecture variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Fusion sub-network, feature encoder and HDR encoder.
    Demc,
    /// Fusion output concatenated with the noisy image into one wider encoder.
    Semc,
    /// Raw features straight into the feature encoder.
    DemcNoSn,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Demc, Variant::Semc, Variant::DemcNoSn];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Demc => "demc",
            Variant::Semc => "semc",
            Variant::DemcNoSn => "demc-nosn",
        }
    }

    pub fn has_fusion(self) -> bool {
        !matches!(self, Variant::DemcNoSn)
    }

    /// Inputs to each skip fusion: the decoder tensor plus one tap per encoder.
    pub fn skip_arity(self) -> usize {
        match self {
            Variant::Semc => 2,
            Variant::Demc | Variant::DemcNoSn => 3,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "demc" => Ok(Variant::Demc),
            "semc" => Ok(Variant::Semc),
            "demc-nosn" | "demcnosn" | "demc_nosn" => Ok(Variant::DemcNoSn),
            other => Err(format!(
                "unknown variant '{other}' (expected demc, semc or demc-nosn)"
            )),
        }
    }
}

/// How a parameter tensor is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in ±√(6/(fan_in+fan_out)).
    Xavier,
    Zeros,
    Ones,
    /// Separable `[0.25, 0.75, 0.75, 0.25]` kernel on matching channel pairs.
    Bilinear,
    /// `[I I … I]` with `arity` identity blocks.
    SkipIdentity { arity: usize },
}

/// One declared parameter (or buffer) of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
    pub trainable: bool,
}

/// Channel plan and variant of a denoiser.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub variant: Variant,
    /// `[in, b1, b2, b3, out]` channels of the fusion blocks.
    pub fusion_channels: [usize; 5],
    pub encoder_channels: [usize; LEVELS],
    pub decoder_channels: [usize; LEVELS],
    pub final_output_channels: usize,
    pub seed: u64,
}

pub const DEFAULT_ENCODER: [usize; LEVELS] = [32, 64, 128, 256, 512];
pub const DEFAULT_FUSION: [usize; 5] = [FEATURE_CHANNELS, 32, 32, 32, COLOR_CHANNELS];

fn reversed(ladder: [usize; LEVELS]) -> [usize; LEVELS] {
    let mut r = ladder;
    r.reverse();
    r
}

impl ModelSpec {
    /// The paper-sized network; SEMC gets a widened encoder whose parameter
    /// count matches DEMC.
    pub fn new(variant: Variant, seed: u64) -> Self {
        let demc = Self::with_ladder(Variant::Demc, DEFAULT_ENCODER, seed);
        match variant {
            Variant::Semc => demc.matched_semc(),
            _ => Self::with_ladder(variant, DEFAULT_ENCODER, seed),
        }
    }

    pub fn with_ladder(variant: Variant, encoder_channels: [usize; LEVELS], seed: u64) -> Self {
        ModelSpec {
            variant,
            fusion_channels: DEFAULT_FUSION,
            encoder_channels,
            decoder_channels: reversed(encoder_channels),
            final_output_channels: COLOR_CHANNELS,
            seed,
        }
    }

    /// Same channel plan scaled by `factor` (rounded, at least one channel).
    pub fn scaled(variant: Variant, factor: f64, seed: u64) -> Self {
        let ladder = DEFAULT_ENCODER.map(|c| ((c as f64 * factor).round() as usize).max(1));
        let mut spec = Self::with_ladder(variant, ladder, seed);
        let f = ((32.0 * factor).round() as usize).max(1);
        spec.fusion_channels = [FEATURE_CHANNELS, f, f, f, COLOR_CHANNELS];
        spec
    }

    /// SEMC spec with encoder widths chosen so its trainable parameter count is
    /// as close as possible to this DEMC spec's.
    pub fn matched_semc(&self) -> Self {
        let target = self.param_count() as f64;
        let mut best: Option<(f64, ModelSpec)> = None;
        // width multipliers from 1.0 to 2.0 in 0.001 steps
        for step in 0..=1000 {
            let m = 1.0 + step as f64 / 1000.0;
            let ladder = self.encoder_channels.map(|c| (c as f64 * m).round() as usize);
            let mut cand = Self::with_ladder(Variant::Semc, ladder, self.seed);
            cand.fusion_channels = self.fusion_channels;
            let diff = (cand.param_count() as f64 - target).abs() / target;
            if best.as_ref().is_none_or(|(d, _)| diff < *d) {
                best = Some((diff, cand));
            }
        }
        best.expect("non-empty search").1
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.decoder_channels != reversed(self.encoder_channels) {
            return Err(format!(
                "decoder ladder {:?} must mirror encoder ladder {:?}",
                self.decoder_channels, self.encoder_channels
            ));
        }
        if self.fusion_channels[0] != FEATURE_CHANNELS || self.fusion_channels[4] != COLOR_CHANNELS {
            return Err(format!(
                "fusion must map {FEATURE_CHANNELS} -> {COLOR_CHANNELS} channels, got {:?}",
                self.fusion_channels
            ));
        }
        if self.encoder_channels.iter().chain(&self.fusion_channels).any(|&c| c == 0) {
            return Err("channel counts must be positive".into());
        }
        Ok(())
    }

    /// Channels entering each encoder, in `(prefix, channels)` form.
    pub fn encoders(&self) -> Vec<(&'static str, usize)> {
        match self.variant {
            Variant::Demc => vec![("enc_feat", COLOR_CHANNELS), ("enc_hdr", COLOR_CHANNELS)],
            Variant::DemcNoSn => vec![("enc_feat", FEATURE_CHANNELS), ("enc_hdr", COLOR_CHANNELS)],
            Variant::Semc => vec![("enc", 2 * COLOR_CHANNELS)],
        }
    }

    /// Every parameter and buffer, in initialisation order.
    pub fn layout(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<ParamDecl>, name: String, co: usize, ci: usize, k: usize, init| {
            out.push(ParamDecl {
                name: format!("{name}.w"),
                shape: Shape::new(co, ci, k, k),
                init,
                trainable: true,
            });
            out.push(ParamDecl {
                name: format!("{name}.b"),
                shape: Shape::vector(co),
                init: Init::Zeros,
                trainable: true,
            });
        };
        if self.variant.has_fusion() {
            let f = self.fusion_channels;
            for b in 0..4 {
                let block = format!("fusion.b{}", b + 1);
                conv(&mut out, format!("{block}.conv"), f[b + 1], f[b], 3, Init::Xavier);
                if b == 1 || b == 2 {
                    let c = f[b + 1];
                    let bn = |suffix: &str, init, trainable| ParamDecl {
                        name: format!("{block}.bn.{suffix}"),
                        shape: Shape::vector(c),
                        init,
                        trainable,
                    };
                    out.push(bn("gamma", Init::Ones, true));
                    out.push(bn("beta", Init::Zeros, true));
                    out.push(bn("running_mean", Init::Zeros, false));
                    out.push(bn("running_var", Init::Ones, false));
                }
            }
        }
        for (prefix, mut ci) in self.encoders() {
            for (u, &co) in self.encoder_channels.iter().enumerate() {
                for l in 0..3 {
                    conv(&mut out, format!("{prefix}.u{}.c{}", u + 1, l + 1), co, ci, 3, Init::Xavier);
                    ci = co;
                }
            }
        }
        let arity = self.variant.skip_arity();
        let mut prev = *self.encoder_channels.last().unwrap();
        for (k, &co) in self.decoder_channels.iter().enumerate() {
            // deconv weights are [in, out, 4, 4]
            out.push(ParamDecl {
                name: format!("dec.up{}.w", k + 1),
                shape: Shape::new(prev, co, 4, 4),
                init: Init::Bilinear,
                trainable: true,
            });
            out.push(ParamDecl {
                name: format!("dec.up{}.b", k + 1),
                shape: Shape::vector(co),
                init: Init::Zeros,
                trainable: true,
            });
            conv(&mut out, format!("dec.skip{}", k + 1), co, arity * co, 1, Init::SkipIdentity { arity });
            prev = co;
        }
        conv(&mut out, "dec.out".into(), self.final_output_channels, prev, 3, Init::Xavier);
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .filter(|d| d.trainable)
            .map(|d| d.shape.numel())
            .sum()
    }

    /// Recovers variant and channel plan from tensor names and shapes, as
    /// found in a checkpoint. The seed is not recorded and comes back as 0.
    pub fn infer(shapes: &BTreeMap<String, Shape>) -> Result<Self, String> {
        let out_channels = |name: &str| {
            shapes
                .get(name)
                .map(|s| s.n)
                .ok_or_else(|| format!("missing tensor '{name}'"))
        };
        let variant = if shapes.contains_key("enc.u1.c1.w") {
            Variant::Semc
        } else if shapes.contains_key("fusion.b1.conv.w") {
            Variant::Demc
        } else if shapes.contains_key("enc_feat.u1.c1.w") {
            Variant::DemcNoSn
        } else {
            return Err("no encoder tensors found".into());
        };
        let prefix = if variant == Variant::Semc { "enc" } else { "enc_hdr" };
        let mut ladder = [0; LEVELS];
        for (k, c) in ladder.iter_mut().enumerate() {
            *c = out_channels(&format!("{prefix}.u{}.c1.w", k + 1))?;
        }
        let mut spec = Self::with_ladder(variant, ladder, 0);
        if variant.has_fusion() {
            for b in 1..=3 {
                spec.fusion_channels[b] = out_channels(&format!("fusion.b{b}.conv.w"))?;
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infer_recovers_every_variant() {
        for spec in [
            ModelSpec::new(Variant::Demc, 0),
            ModelSpec::new(Variant::Semc, 0),
            ModelSpec::new(Variant::DemcNoSn, 0),
            ModelSpec::scaled(Variant::Demc, 0.25, 0),
        ] {
            let shapes = spec.layout().into_iter().map(|d| (d.name, d.shape)).collect();
            assert_eq!(ModelSpec::infer(&shapes).unwrap(), spec);
        }
        assert!(ModelSpec::infer(&BTreeMap::new()).is_err());
    }

    fn conv(co: usize, ci: usize, k: usize) -> usize {
        co * ci * k * k + co
    }

    #[test]
    fn fusion_param_count_closed_form() {
        let spec = ModelSpec::new(Variant::Demc, 0);
        let fusion: usize = spec
            .layout()
            .iter()
            .filter(|d| d.trainable && d.name.starts_with("fusion."))
            .map(|d| d.shape.numel())
            .sum();
        // 12→32, 32→32 (+BN), 32→32 (+BN), 32→3
        let expected = conv(32, 12, 3) + 2 * (conv(32, 32, 3) + 64) + conv(3, 32, 3);
        assert_eq!(expected, 3488 + 2 * 9312 + 867);
        assert_eq!(fusion, expected);
    }

    #[test]
    fn decoder_param_count_closed_form() {
        let spec = ModelSpec::new(Variant::Demc, 0);
        let dec: usize = spec
            .layout()
            .iter()
            .filter(|d| d.name.starts_with("dec."))
            .map(|d| d.shape.numel())
            .sum();
        let ladder = [512usize, 256, 128, 64, 32];
        let mut expected = 0;
        let mut prev = 512;
        for &k in &ladder {
            expected += prev * k * 16 + k; // deconv
            expected += conv(k, 3 * k, 1); // skip fuse
            prev = k;
        }
        expected += conv(3, 32, 3);
        assert_eq!(dec, expected);
    }

    #[test]
    fn encoder_param_count_closed_form() {
        let spec = ModelSpec::new(Variant::Demc, 0);
        let enc: usize = spec
            .layout()
            .iter()
            .filter(|d| d.name.starts_with("enc_hdr."))
            .map(|d| d.shape.numel())
            .sum();
        let mut expected = 0;
        let mut ci = 3;
        for co in [32, 64, 128, 256, 512] {
            expected += conv(co, ci, 3) + 2 * conv(co, co, 3);
            ci = co;
        }
        assert_eq!(enc, expected);
    }

    #[test]
    fn semc_matches_demc_within_two_percent() {
        let demc = ModelSpec::new(Variant::Demc, 1).param_count() as f64;
        let semc_spec = ModelSpec::new(Variant::Semc, 1);
        semc_spec.validate().unwrap();
        let semc = semc_spec.param_count() as f64;
        assert!((semc - demc).abs() / demc < 0.02, "{semc} vs {demc}");
        assert!(semc_spec.encoder_channels[0] > 32);
    }

    #[test]
    fn ladder_invariants() {
        for v in Variant::ALL {
            let s = ModelSpec::new(v, 0);
            s.validate().unwrap();
            assert_eq!(s.encoder_channels.len(), 5);
            assert_eq!(s.decoder_channels.len(), 5);
            for k in 0..LEVELS {
                assert_eq!(s.decoder_channels[k], s.encoder_channels[LEVELS - 1 - k]);
            }
        }
        let mut bad = ModelSpec::new(Variant::Demc, 0);
        bad.decoder_channels[0] = 7;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("demc-nosn".parse::<Variant>().unwrap(), Variant::DemcNoSn);
        assert_eq!("SEMC".parse::<Variant>().unwrap(), Variant::Semc);
        assert!("kpcn".parse::<Variant>().is_err());
    }
}
