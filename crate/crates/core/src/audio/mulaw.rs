//! μ-law companding between floats in [−1, 1] and 8-bit codes.
//!
//! Encode: f(x) = sign(x)·ln(1 + 255|x|)/ln(256), then round (f+1)/2·255
//! half-up to a code. Decode inverts through the midpoint of the code's
//! f-interval, which makes encode(decode(c)) == c for every code.

const MU: f32 = 255.0;

/// Companded value in [−1, 1] for a (clamped) sample.
fn compand(x: f32) -> f32 {
    let x = x.clamp(-1.0, 1.0);
    x.signum() * (1.0 + MU * x.abs()).ln() / (1.0 + MU).ln()
}

fn expand(f: f32) -> f32 {
    f.signum() * ((1.0 + MU).powf(f.abs()) - 1.0) / MU
}

/// Quantize a sample to one of 256 μ-law codes. Out-of-range inputs clamp.
pub fn mu_law_encode(x: f32) -> u8 {
    let f = compand(x);
    let code = ((f + 1.0) / 2.0 * 255.0 + 0.5).floor();
    code.clamp(0.0, 255.0) as u8
}

/// Float sample at the midpoint (in companded space) of a code's cell.
pub fn mu_law_decode(code: u8) -> f32 {
    let f = 2.0 * f32::from(code) / 255.0 - 1.0;
    expand(f)
}

/// Width in sample space of the μ-law cell a value encodes into. The
/// encode→decode roundtrip error is bounded by this.
pub fn cell_width(code: u8) -> f32 {
    let f_lo = (2.0 * (f32::from(code) - 0.5) / 255.0 - 1.0).max(-1.0);
    let f_hi = (2.0 * (f32::from(code) + 0.5) / 255.0 - 1.0).min(1.0);
    expand(f_hi) - expand(f_lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_endpoints() {
        assert_eq!(mu_law_encode(1.0), 255);
        assert_eq!(mu_law_encode(-1.0), 0);
        assert_eq!(mu_law_encode(2.0), 255); // clamped
        assert_eq!(mu_law_encode(-7.5), 0);
    }

    #[test]
    fn zero_maps_to_128() {
        // f = 0 → (0+1)/2·255 = 127.5, round-half-up → 128
        assert_eq!(mu_law_encode(0.0), 128);
    }

    #[test]
    fn codes_are_fixed_points() {
        for c in 0..=255u8 {
            assert_eq!(mu_law_encode(mu_law_decode(c)), c, "code {c}");
        }
    }

    #[test]
    fn encode_is_monotone_over_sweep() {
        let mut prev = mu_law_encode(-1.0);
        for i in 1..=10_000 {
            let x = -1.0 + 2.0 * i as f32 / 10_000.0;
            let c = mu_law_encode(x);
            assert!(c >= prev, "encode not monotone at x={x}: {c} < {prev}");
            prev = c;
        }
    }

    #[test]
    fn roundtrip_error_bounded_by_cell_width() {
        for i in 0..=10_000 {
            let x = -1.0 + 2.0 * i as f32 / 10_000.0;
            let c = mu_law_encode(x);
            let err = (mu_law_decode(c) - x).abs();
            let bound = cell_width(c) + 1e-6;
            assert!(err <= bound, "x={x} code={c} err={err} bound={bound}");
        }
    }

    #[test]
    fn decode_stays_in_unit_range() {
        for c in 0..=255u8 {
            let x = mu_law_decode(c);
            assert!((-1.0..=1.0).contains(&x), "code {c} decodes to {x}");
        }
    }
}
