//! Token frequency and bitrate accounting.

use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bitrate {
    pub frequency_hz: f64,
    pub speech_bps: f64,
    /// Speech plus text bits, when a text cost per token is given.
    pub joint_bps: Option<f64>,
}

/// Bits carried by one position of `layers` codes from `codebook_size`
/// entries each.
pub fn bits_per_position(layers: usize, codebook_size: usize) -> Result<f64> {
    if layers == 0 || codebook_size == 0 {
        bail!(Argument, "need at least one layer and one code");
    }
    Ok(layers as f64 * libm::log2(codebook_size as f64))
}

/// `Σ N_i / Σ duration_i` over `(positions, duration_s)` pairs.
pub fn token_frequency(items: &[(usize, f64)]) -> Result<f64> {
    let positions: usize = items.iter().map(|&(n, _)| n).sum();
    let duration: f64 = items.iter().map(|&(_, d)| d).sum();
    if !(duration > 0.0) || !duration.is_finite() {
        bail!(Argument, "total duration must be positive, got {}", duration);
    }
    Ok(positions as f64 / duration)
}

pub fn compute_bitrate(
    items: &[(usize, f64)],
    layers: usize,
    codebook_size: usize,
    text_bits_per_token: Option<f64>,
) -> Result<Bitrate> {
    let frequency_hz = token_frequency(items)?;
    let speech_bps = frequency_hz * bits_per_position(layers, codebook_size)?;
    if let Some(b) = text_bits_per_token {
        if !(b >= 0.0) || !b.is_finite() {
            bail!(Argument, "text bits per token must be finite and non-negative");
        }
    }
    Ok(Bitrate {
        frequency_hz,
        speech_bps,
        joint_bps: text_bits_per_token.map(|b| speech_bps + frequency_hz * b),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    #[test]
    fn hand_computed_examples() {
        let b = compute_bitrate(&[(60, 15.0), (40, 10.0)], 4, 512, None).unwrap();
        assert_eq!(b.frequency_hz, 4.0);
        assert_eq!(b.speech_bps, 144.0);
        assert_eq!(b.joint_bps, None);
        assert_eq!(bits_per_position(1, 2).unwrap(), 1.0);
        let j = compute_bitrate(&[(100, 25.0)], 4, 512, Some(10.0)).unwrap();
        assert_eq!(j.joint_bps, Some(184.0));
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(matches!(compute_bitrate(&[(10, 0.0)], 4, 512, None), Err(Error::Argument(_))));
        assert!(matches!(compute_bitrate(&[], 4, 512, None), Err(Error::Argument(_))));
        assert!(matches!(bits_per_position(0, 512), Err(Error::Argument(_))));
        assert!(compute_bitrate(&[(10, 1.0)], 4, 512, Some(-1.0)).is_err());
    }
}
