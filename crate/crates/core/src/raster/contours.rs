use super::components::label;
use super::{BitMask, Connectivity, Point};

/// Outer contour of one 8-connected component with its holes filled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Contour {
    /// Boundary pixels (component pixels with a 4-neighbour outside it), raster order.
    pub boundary: Vec<Point>,
    /// Filled area in pixels, holes included.
    pub area: usize,
}

/// Fills background regions not 4-connected to the raster border.
pub fn fill_holes(mask: &BitMask) -> BitMask {
    let (w, h) = mask.dims();
    let mut outside = vec![false; w * h];
    let bits = mask.as_slice();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if (x == 0 || y == 0 || x + 1 == w || y + 1 == h) && !bits[y * w + x] && !outside[y * w + x] {
                outside[y * w + x] = true;
                stack.push((x, y));
            }
        }
    }
    while let Some((x, y)) = stack.pop() {
        let mut visit = |nx: usize, ny: usize| {
            let j = ny * w + nx;
            if !bits[j] && !outside[j] {
                outside[j] = true;
                stack.push((nx, ny));
            }
        };
        if x > 0 {
            visit(x - 1, y);
        }
        if x + 1 < w {
            visit(x + 1, y);
        }
        if y > 0 {
            visit(x, y - 1);
        }
        if y + 1 < h {
            visit(x, y + 1);
        }
    }
    BitMask::from_vec(w, h, outside.into_iter().map(|o| !o).collect()).expect("same dimensions")
}

/// External contours: one per 8-connected component after hole filling.
/// Components nested inside another component's hole merge into it.
pub fn contours(mask: &BitMask) -> Vec<Contour> {
    let filled = fill_holes(mask);
    let (ids, n) = label(&filled, Connectivity::Eight);
    let (w, h) = ids.dims();
    let mut out: Vec<Contour> = (0..n).map(|_| Contour { boundary: Vec::new(), area: 0 }).collect();
    let lab = ids.as_slice();
    for y in 0..h {
        for x in 0..w {
            let id = lab[y * w + x];
            if id == 0 {
                continue;
            }
            let c = &mut out[id as usize - 1];
            c.area += 1;
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || lab[y * w + x - 1] != id
                || lab[y * w + x + 1] != id
                || lab[(y - 1) * w + x] != id
                || lab[(y + 1) * w + x] != id;
            if edge {
                c.boundary.push(Point::new(x as i64, y as i64));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> BitMask {
        BitMask::from_fn(rows[0].len(), rows.len(), |x, y| rows[y].as_bytes()[x] == b'#').unwrap()
    }

    #[test]
    fn small_blobs() {
        let c = contours(&mask(&["....", ".##.", "...."]));
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].area, 2);
        let c = contours(&mask(&["....", ".##.", "..#."]));
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].area, 3);
    }

    #[test]
    fn ring_is_filled_and_nested_blob_absorbed() {
        let m = mask(&[
            ".......", //
            ".#####.",
            ".#...#.",
            ".#.#.#.",
            ".#...#.",
            ".#####.",
            ".......",
        ]);
        let c = contours(&m);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].area, 25);
        assert_eq!(c[0].boundary.len(), 16);
    }

    #[test]
    fn border_touching_background_is_not_a_hole() {
        let m = mask(&["#.#", "#.#", "###"]);
        let c = contours(&m);
        assert_eq!(c[0].area, 7);
    }
}
