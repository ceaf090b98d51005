//! Catmull-Rom (Keys, a = -0.5) interpolation on small square grids.

use crate::scalar::Real;

/// Kernel weights for the four samples at offsets -1, 0, 1, 2 around a
/// fractional position `t` in [0, 1).
#[inline]
pub fn catmull_rom_weights<T: Real>(t: T) -> [T; 4] {
    let half = T::lit(0.5);
    let t2 = t * t;
    let t3 = t2 * t;
    let two = T::lit(2.0);
    let three = T::lit(3.0);
    [
        half * (-t3 + two * t2 - t),
        half * (three * t3 - T::lit(5.0) * t2 + two),
        half * (-three * t3 + T::lit(4.0) * t2 + t),
        half * (t3 - t2),
    ]
}

/// Base index and fraction of a local grid coordinate, if the 4x4 support
/// lies entirely inside a grid of `size` nodes.
#[inline]
pub fn support<T: Real>(s: T, size: usize) -> Option<(usize, T)> {
    if !s.is_finite() {
        return None;
    }
    let base = s.floor();
    let i = base.to_i64()?;
    if i < 1 || i + 2 > size as i64 - 1 {
        return None;
    }
    Some((i as usize, s - base))
}

/// Interpolates every channel of a `size x size x channels` grid stored
/// row-major (v outer, u inner, channel innermost) at local coordinates
/// `(su, sv)`. Returns `None` outside the safe interior.
pub fn sample_grid<T: Real>(
    data: &[T],
    size: usize,
    channels: usize,
    su: T,
    sv: T,
    out: &mut [T],
) -> Option<()> {
    let (iu, tu) = support(su, size)?;
    let (iv, tv) = support(sv, size)?;
    let wu = catmull_rom_weights(tu);
    let wv = catmull_rom_weights(tv);
    out[..channels].iter_mut().for_each(|o| *o = T::zero());
    for (b, &wb) in wv.iter().enumerate() {
        let row = iv + b - 1;
        for (a, &wa) in wu.iter().enumerate() {
            let col = iu + a - 1;
            let w = wa * wb;
            let base = (row * size + col) * channels;
            for (o, &x) in out[..channels].iter_mut().zip(&data[base..base + channels]) {
                *o += w * x;
            }
        }
    }
    Some(())
}
