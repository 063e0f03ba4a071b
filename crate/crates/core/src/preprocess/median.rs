//! Impulse-detecting adaptive median filter.

use crate::image::Image;
use crate::scalar::Real;

/// Classical two-stage adaptive median. A window is *saturated* when its
/// median equals its minimum or maximum; saturated windows grow by 2 up to
/// `max_kernel`, after which the median is emitted. In an unsaturated
/// window, the centre pixel is replaced by the median only if it equals the
/// window extreme (an impulse). Borders use clamped coordinates.
pub fn adaptive_median_filter<T: Real>(image: &Image<T>, max_kernel: usize) -> Image<T> {
    let max_kernel = max_kernel.max(3) | 1;
    let mut window: Vec<T> = Vec::with_capacity(max_kernel * max_kernel);
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let z = image.get(x, y);
            let mut k = 3;
            loop {
                let r = (k / 2) as i64;
                window.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        window.push(image.get_clamped(x as i64 + dx, y as i64 + dy));
                    }
                }
                window.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                let (lo, hi) = (window[0], window[window.len() - 1]);
                let med = window[window.len() / 2];
                if lo < med && med < hi {
                    if !(lo < z && z < hi) {
                        out.set(x, y, med);
                    }
                    break;
                }
                if k + 2 > max_kernel {
                    out.set(x, y, med);
                    break;
                }
                k += 2;
            }
        }
    }
    out
}
