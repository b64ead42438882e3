//! Effective kernel size of a zero-padded 2D convolution.
//!
//! Near the border part of the kernel lands on padding, so the average number
//! of live taps per output position is below `k_h * k_w`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Largest `h_in * w_in` the brute-force oracle expands.
pub const ORACLE_MAX_INPUT: usize = 10_000;

/// Single-channel convolution geometry with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub k_h: usize,
    pub k_w: usize,
    pub s_h: usize,
    pub s_w: usize,
    pub p_h: usize,
    pub p_w: usize,
    pub h_in: usize,
    pub w_in: usize,
}

impl ConvGeometry {
    pub fn new(kernel: [usize; 2], stride: [usize; 2], pad: [usize; 2], input: [usize; 2]) -> Result<Self> {
        let g = Self {
            k_h: kernel[0],
            k_w: kernel[1],
            s_h: stride[0],
            s_w: stride[1],
            p_h: pad[0],
            p_w: pad[1],
            h_in: input[0],
            w_in: input[1],
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidGeometry(msg));
        if self.k_h == 0 || self.k_w == 0 {
            return bad("kernel extents must be at least 1".into());
        }
        if self.s_h == 0 || self.s_w == 0 {
            return bad("strides must be at least 1".into());
        }
        if self.h_in == 0 || self.w_in == 0 {
            return bad("input extents must be at least 1".into());
        }
        if self.p_h >= self.k_h || self.p_w >= self.k_w {
            return bad(format!(
                "padding ({}, {}) must be smaller than the kernel ({}, {})",
                self.p_h, self.p_w, self.k_h, self.k_w
            ));
        }
        if self.h_in + 2 * self.p_h < self.k_h || self.w_in + 2 * self.p_w < self.k_w {
            return bad("output extent would be below 1".into());
        }
        Ok(())
    }

    pub fn h_out(&self) -> usize {
        (self.h_in + 2 * self.p_h - self.k_h) / self.s_h + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w_in + 2 * self.p_w - self.k_w) / self.s_w + 1
    }
}

/// Kernel rows (or columns) cut off at both ends of one spatial axis, per output index.
///
/// `upper` covers the leading border: output `i` starts at padded coordinate
/// `i*s`, so `p - i*s` taps fall on padding. The trailing border starts at the
/// first output whose window runs past the input
/// (`⌊(in + p - k)/s⌋ + 1`); from there `s*i + k - in - p` taps are cut.
fn side_cuts(k: usize, s: usize, p: usize, input: usize, out: usize) -> (Vec<i64>, Vec<i64>) {
    let (k, s, p, input, out) = (k as i64, s as i64, p as i64, input as i64, out as i64);
    let mut leading = vec![0i64; out as usize];
    let mut trailing = vec![0i64; out as usize];
    let clamp = |v: i64| v.clamp(0, k);

    for i in 0..=(p / s).min(out - 1) {
        leading[i as usize] = clamp(p - i * s);
    }
    let first_trailing = (input + p - k).div_euclid(s) + 1;
    for i in first_trailing.max(0)..out {
        trailing[i as usize] = clamp(s * i + k - input - p);
    }
    (leading, trailing)
}

/// Number of live taps summed over all output positions, as an exact integer.
fn live_tap_total(g: &ConvGeometry) -> i64 {
    let (h_out, w_out) = (g.h_out(), g.w_out());
    let (upper, lower) = side_cuts(g.k_h, g.s_h, g.p_h, g.h_in, h_out);
    let (left, right) = side_cuts(g.k_w, g.s_w, g.p_w, g.w_in, w_out);
    let (k_h, k_w) = (g.k_h as i64, g.k_w as i64);

    let total = k_h * k_w * (h_out * w_out) as i64;
    let row_cut: i64 = upper.iter().zip(&lower).map(|(u, l)| u + l).sum();
    let col_cut: i64 = left.iter().zip(&right).map(|(l, r)| l + r).sum();
    let removed = row_cut * w_out as i64 * k_w + col_cut * h_out as i64 * k_h;
    // Corner regions are subtracted twice above.
    let restored = row_cut * col_cut;
    total - removed + restored
}

/// Effective kernel size `k̃_h k̃_w` of `g`.
pub fn effective_kernel_size<T: Scalar>(g: &ConvGeometry) -> Result<T> {
    g.validate()?;
    let positions = g.h_out() * g.w_out();
    Ok(T::lit(live_tap_total(g) as f64) / T::from_usize_lossy(positions))
}

/// Expanded single-channel transform: one row per output position, entry
/// `t + 1` where kernel tap `t` reads that input pixel, 0 elsewhere.
pub fn expand_transform(g: &ConvGeometry) -> Result<Vec<Vec<u32>>> {
    g.validate()?;
    let cols = g.h_in * g.w_in;
    let mut rows = Vec::with_capacity(g.h_out() * g.w_out());
    for oh in 0..g.h_out() {
        for ow in 0..g.w_out() {
            let mut row = vec![0u32; cols];
            for a in 0..g.k_h {
                let ih = (oh * g.s_h + a) as i64 - g.p_h as i64;
                if ih < 0 || ih >= g.h_in as i64 {
                    continue;
                }
                for b in 0..g.k_w {
                    let iw = (ow * g.s_w + b) as i64 - g.p_w as i64;
                    if iw < 0 || iw >= g.w_in as i64 {
                        continue;
                    }
                    row[ih as usize * g.w_in + iw as usize] = (a * g.k_w + b + 1) as u32;
                }
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Mean number of kernel taps per row of the expanded transform that hit real input.
pub fn brute_force_kernel_oracle<T: Scalar>(g: &ConvGeometry) -> Result<T> {
    g.validate()?;
    let size = g.h_in * g.w_in;
    if size > ORACLE_MAX_INPUT {
        return Err(Error::SizeLimit {
            what: "oracle input h_in*w_in",
            size,
            limit: ORACLE_MAX_INPUT,
        });
    }
    let rows = expand_transform(g)?;
    let live: usize = rows.iter().map(|r| r.iter().filter(|&&t| t != 0).count()).sum();
    Ok(T::lit(live as f64) / T::from_usize_lossy(rows.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(k: usize, s: usize, p: usize, input: usize) -> ConvGeometry {
        ConvGeometry::new([k, k], [s, s], [p, p], [input, input]).unwrap()
    }

    #[test]
    fn unpadded_is_full_kernel() {
        assert_eq!(effective_kernel_size::<f64>(&geom(3, 1, 0, 32)).unwrap(), 9.0);
        assert_eq!(effective_kernel_size::<f64>(&geom(1, 1, 0, 7)).unwrap(), 1.0);
        assert_eq!(brute_force_kernel_oracle::<f64>(&geom(3, 1, 0, 5)).unwrap(), 9.0);
        assert_eq!(brute_force_kernel_oracle::<f64>(&geom(2, 2, 0, 4)).unwrap(), 4.0);
    }

    #[test]
    fn three_by_three_padded_grid() {
        // Output rows see {4,6,4, 6,9,6, 4,6,4} live taps.
        let g = geom(3, 1, 1, 3);
        let expect = 49.0 / 9.0;
        assert!((brute_force_kernel_oracle::<f64>(&g).unwrap() - expect).abs() < 1e-12);
        assert!((effective_kernel_size::<f64>(&g).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn corner_dominated_toy_case() {
        // 2x2 kernel, pad 1, 1x1 input: each of the 4 outputs sees one tap.
        let g = geom(2, 1, 1, 1);
        assert_eq!(brute_force_kernel_oracle::<f64>(&g).unwrap(), 1.0);
        assert_eq!(effective_kernel_size::<f64>(&g).unwrap(), 1.0);
        // 2x2 input: corners see 1 tap, edges 2, center 4 -> 2.0 average? (4*1+4*2+4)/9 = 16/9.
        let g = geom(2, 1, 1, 2);
        assert!((effective_kernel_size::<f64>(&g).unwrap() - 16.0 / 9.0).abs() < 1e-12);
        // stride 2 on 2x2 input picks only corner windows.
        let g = geom(2, 2, 1, 2);
        assert_eq!(effective_kernel_size::<f64>(&g).unwrap(), 1.0);
        let g = ConvGeometry::new([2, 2], [1, 1], [1, 0], [1, 2]).unwrap();
        assert_eq!(effective_kernel_size::<f64>(&g).unwrap(), 2.0);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(ConvGeometry::new([3, 3], [1, 1], [3, 0], [8, 8]).is_err());
        assert!(ConvGeometry::new([5, 5], [1, 1], [0, 0], [3, 3]).is_err());
        assert!(ConvGeometry::new([3, 3], [0, 1], [0, 0], [8, 8]).is_err());
        let big = ConvGeometry::new([3, 3], [1, 1], [1, 1], [200, 200]).unwrap();
        assert!(matches!(brute_force_kernel_oracle::<f64>(&big), Err(Error::SizeLimit { .. })));
    }

    fn any_geometry(max: usize) -> impl Strategy<Value = ConvGeometry> {
        (1..=7usize, 1..=7usize, 1..=4usize, 1..=4usize, 0..7usize, 0..7usize, 1..=max, 1..=max)
            .prop_filter_map("invalid geometry", |(kh, kw, sh, sw, ph, pw, h, w)| {
                ConvGeometry::new([kh, kw], [sh, sw], [ph % kh, pw % kw], [h, w]).ok()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(600))]

        #[test]
        fn matches_oracle(g in any_geometry(64)) {
            let fast: f64 = effective_kernel_size(&g).unwrap();
            let slow: f64 = brute_force_kernel_oracle(&g).unwrap();
            prop_assert!((fast - slow).abs() <= 1e-9, "{g:?}: {fast} vs {slow}");
        }

        #[test]
        fn within_kernel_bounds(g in any_geometry(64)) {
            let v: f64 = effective_kernel_size(&g).unwrap();
            prop_assert!(v > 0.0 && v <= (g.k_h * g.k_w) as f64);
        }

        #[test]
        fn more_padding_never_adds_taps(g in any_geometry(40)) {
            let mut wider = g;
            wider.p_h += 1;
            if wider.validate().is_ok() && wider.h_out() == g.h_out() {
                let a: f64 = effective_kernel_size(&g).unwrap();
                let b: f64 = effective_kernel_size(&wider).unwrap();
                prop_assert!(b <= a + 1e-12);
            }
        }

        #[test]
        fn zero_padding_is_exact(k in 1..6usize, s in 1..4usize, h in 6..30usize, w in 6..30usize) {
            let g = ConvGeometry::new([k, k], [s, s], [0, 0], [h, w]).unwrap();
            prop_assert_eq!(effective_kernel_size::<f64>(&g).unwrap(), (k * k) as f64);
        }
    }
}
