//! Counter-based Gaussian variates.
//!
//! A variate is a pure function of `(seed, row, col)`: the row key is a
//! SplitMix64 hash of `(seed, row)` and the column indexes into the
//! SplitMix64 sequence started from that key. The 53-bit uniform is mapped
//! to a standard normal by Wichura's AS 241 inverse CDF (relative accuracy
//! about 1e-16). Nothing is carried between calls, so any block of any row
//! can be regenerated independently and in any order.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent 64-bit seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    mix64(mix64(seed ^ 0x5EED_5EED_5EED_5EED).wrapping_add(label.wrapping_mul(GOLDEN)))
}

/// Key for one row of the generator; hoist it out of inner loops.
#[inline]
pub fn row_key(seed: u64, row: u64) -> u64 {
    mix64(seed.wrapping_add(mix64(row.wrapping_add(1).wrapping_mul(GOLDEN))))
}

#[inline]
pub fn uniform_open(key: u64, col: u64) -> f64 {
    let bits = mix64(key.wrapping_add(col.wrapping_add(1).wrapping_mul(GOLDEN)));
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

#[inline]
pub fn normal_at(key: u64, col: u64) -> f64 {
    inverse_normal_cdf(uniform_open(key, col))
}

/// Standard normal variate for `(seed, row, col)`.
pub fn gaussian(seed: u64, row: u64, col: u64) -> f64 {
    normal_at(row_key(seed, row), col)
}

/// Fills `out` with the variates of `row` at columns `start..start + out.len()`.
pub fn fill_gaussian_row(seed: u64, row: u64, start: u64, out: &mut [f64]) {
    let key = row_key(seed, row);
    for (i, v) in out.iter_mut().enumerate() {
        *v = normal_at(key, start + i as u64);
    }
}

/// Wichura (1988), algorithm AS 241 (PPND16).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2509.080_928_730_122_7 * r + 33430.575_583_588_128) * r
                + 67265.770_927_008_700)
                * r
                + 45921.953_931_549_871)
                * r
                + 13731.693_765_509_461)
                * r
                + 1971.590_950_306_551_3)
                * r
                + 133.141_667_891_784_38)
                * r
                + 3.387_132_872_796_366_5)
            / (((((((5226.495_278_852_545_5 * r + 28729.085_735_721_942) * r
                + 39307.895_800_092_710)
                * r
                + 21213.794_301_586_595)
                * r
                + 5394.196_021_424_751)
                * r
                + 687.187_007_492_057_9)
                * r
                + 42.313_330_701_600_911)
                * r
                + 1.0);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        (((((((7.745_450_142_783_414e-4 * r + 0.022_723_844_989_269_184) * r
            + 0.241_780_725_177_450_6)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5)
            / (((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
                + 0.015_198_666_563_616_457)
                * r
                + 0.148_103_976_427_480_08)
                * r
                + 0.689_767_334_985_1)
                * r
                + 1.676_384_830_183_803_8)
                * r
                + 2.053_191_626_637_759)
                * r
                + 1.0)
    } else {
        let r = r - 5.0;
        (((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 0.026_532_189_526_576_124)
            * r
            + 0.296_560_571_828_504_87)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103)
            / (((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r
                + 1.846_318_317_510_054_8e-5)
                * r
                + 7.868_691_311_456_133e-4)
                * r
                + 0.014_875_361_290_850_615)
                * r
                + 0.136_929_880_922_735_8)
                * r
                + 0.599_832_206_555_888)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}
