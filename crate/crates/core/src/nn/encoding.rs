use std::f64::consts::PI;

use super::Real;

/// Output width for `components` inputs encoded with `freqs` octaves.
pub fn encoded_width(components: usize, freqs: usize, include_input: bool) -> usize {
    components * (2 * freqs + include_input as usize)
}

/// Fourier features of each input component:
/// `[x?, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]`.
pub fn positional_encoding(x: &[f64], freqs: usize, include_input: bool) -> Vec<f64> {
    let mut out = vec![0.0; encoded_width(x.len(), freqs, include_input)];
    encode_into(x, freqs, include_input, &mut out);
    out
}

/// Writes the encoding of `x` into `out`, which must have the encoded width.
///
/// Octaves are generated with the double-angle recurrence in `f64`, so only one
/// `sin_cos` is evaluated per component.
pub fn encode_into<T: Real>(x: &[f64], freqs: usize, include_input: bool, out: &mut [T]) {
    assert_eq!(out.len(), encoded_width(x.len(), freqs, include_input));
    let mut k = 0;
    for &xi in x {
        if include_input {
            out[k] = T::from_f64(xi);
            k += 1;
        }
        if freqs == 0 {
            continue;
        }
        let (mut s, mut c) = (PI * xi).sin_cos();
        for _ in 0..freqs {
            out[k] = T::from_f64(s);
            out[k + 1] = T::from_f64(c);
            k += 2;
            let s2 = 2.0 * s * c;
            let c2 = c * c - s * s;
            s = s2;
            c = c2;
        }
    }
}
