use crate::error::{Error, Result};
use crate::ssm::{ScanMode, Selection};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockVariant {
    Unidirectional,
    Bidirectional,
    Decoder,
}

impl BlockVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockVariant::Unidirectional => "unidirectional",
            BlockVariant::Bidirectional => "bidirectional",
            BlockVariant::Decoder => "decoder",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unidirectional" | "uni" => Ok(BlockVariant::Unidirectional),
            "bidirectional" | "bi" => Ok(BlockVariant::Bidirectional),
            "decoder" => Ok(BlockVariant::Decoder),
            other => Err(Error::Config(format!("unknown block variant `{other}`"))),
        }
    }
}

/// Shape and regularization of one Mamba block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub d_in: usize,
    pub n_state: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub dropout_p: f64,
    pub variant: BlockVariant,
    /// Cross-attention heads; only read by the decoder variant.
    pub n_heads: usize,
    pub selection: Selection,
    pub scan: ScanMode,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            d_in: 64,
            n_state: 16,
            expand: 4,
            conv_width: 4,
            dropout_p: 0.2,
            variant: BlockVariant::Unidirectional,
            n_heads: 4,
            selection: Selection::Selective,
            scan: ScanMode::default(),
        }
    }
}

impl BlockConfig {
    /// Width of the SSM branch, `expand · d_in`.
    pub fn inner(&self) -> usize {
        self.expand * self.d_in
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_in == 0 || self.n_state == 0 || self.conv_width == 0 {
            return fail(format!(
                "d_in ({}), n_state ({}) and conv_width ({}) must be positive",
                self.d_in, self.n_state, self.conv_width
            ));
        }
        if self.expand < 1 {
            return fail("expand must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.variant == BlockVariant::Decoder && (self.n_heads == 0 || !self.d_in.is_multiple_of(self.n_heads)) {
            return fail(format!(
                "d_in {} is not divisible by n_heads {}",
                self.d_in, self.n_heads
            ));
        }
        if let ScanMode::Parallel { chunk: 0 } = self.scan {
            return fail("scan chunk must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = BlockConfig::default();
        assert_eq!((c.n_state, c.expand, c.conv_width), (16, 4, 4));
        assert_eq!(c.dropout_p, 0.2);
        c.validate().unwrap();
    }

    #[test]
    fn inner_width_is_expand_times_d_in() {
        let c = BlockConfig {
            d_in: 8,
            ..Default::default()
        };
        assert_eq!(c.inner(), 32);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = BlockConfig::default();
        for bad in [
            BlockConfig { expand: 0, ..base.clone() },
            BlockConfig { dropout_p: 1.0, ..base.clone() },
            BlockConfig { dropout_p: -0.1, ..base.clone() },
            BlockConfig {
                variant: BlockVariant::Decoder,
                d_in: 10,
                n_heads: 4,
                ..base.clone()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
