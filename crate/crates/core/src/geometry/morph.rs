use super::{BinaryCell, MorphScale};

/// Sliding-window maximum with a square kernel anchored at its center.
/// Pixels outside the grid do not contribute.
pub fn dilate(cell: &BinaryCell, scale: MorphScale) -> BinaryCell {
    window_filter(cell, scale, true)
}

/// Sliding-window minimum; the dual of [`dilate`] under complement.
pub fn erode(cell: &BinaryCell, scale: MorphScale) -> BinaryCell {
    window_filter(cell, scale, false)
}

fn window_filter(cell: &BinaryCell, scale: MorphScale, take_max: bool) -> BinaryCell {
    if scale.size() == 1 {
        return cell.clone();
    }
    let (h, w) = (cell.height(), cell.width());
    let rad = scale.radius();
    // max/min over a square window separates into a row pass and a column pass
    let reduce = |a: u8, b: u8| if take_max { a.max(b) } else { a.min(b) };
    let init = if take_max { 0u8 } else { 1u8 };
    let src = cell.values();
    let mut rows = vec![init; h * w];
    for r in 0..h {
        for c in 0..w {
            let lo = c.saturating_sub(rad);
            let hi = (c + rad).min(w - 1);
            rows[r * w + c] = src[r * w + lo..=r * w + hi].iter().copied().fold(init, reduce);
        }
    }
    let mut out = vec![init; h * w];
    for r in 0..h {
        let lo = r.saturating_sub(rad);
        let hi = (r + rad).min(h - 1);
        for c in 0..w {
            out[r * w + c] = (lo..=hi).map(|rr| rows[rr * w + c]).fold(init, reduce);
        }
    }
    BinaryCell::new(h, w, out).expect("same shape as input")
}
