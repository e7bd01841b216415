//! The eight symmetries of a square patch (the dihedral group D4).
//!
//! Canonical indexing: ops 0..=3 rotate counterclockwise by `op * 90`
//! degrees; ops 4..=7 apply the same rotation followed by a horizontal
//! flip. Op 0 is the identity.

use super::image::RgbImage;
use super::TileError;

/// Map output coordinates back to source coordinates for op index `op` on
/// an `n`x`n` patch: dst(x, y) = src(source_coord(op, n, x, y)).
#[inline]
fn source_coord(op: u8, n: u32, x: u32, y: u32) -> (u32, u32) {
    let m = n - 1;
    match op {
        0 => (x, y),
        // 90 CCW moves src (x, y) to dst (y, m - x).
        1 => (m - y, x),
        2 => (m - x, m - y),
        3 => (y, m - x),
        // Rotation followed by a horizontal flip.
        4 => (m - x, y),
        5 => (m - y, m - x),
        6 => (x, m - y),
        7 => (y, x),
        _ => unreachable!(),
    }
}

/// Apply the `op`-th dihedral transform to a square patch.
pub fn dihedral_transform(patch: &RgbImage, op: u8) -> Result<RgbImage, TileError> {
    if op > 7 {
        return Err(TileError::DihedralIndex(op));
    }
    if patch.width != patch.height {
        return Err(TileError::NotSquare {
            w: patch.width,
            h: patch.height,
        });
    }
    if op == 0 {
        return Ok(patch.clone());
    }
    let n = patch.width;
    let mut out = RgbImage::new(n, n);
    for y in 0..n {
        for x in 0..n {
            let (sx, sy) = source_coord(op, n, x, y);
            out.set(x, y, patch.get(sx, sy));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(n: u32) -> RgbImage {
        let mut img = RgbImage::new(n, n);
        for y in 0..n {
            for x in 0..n {
                img.set(x, y, [(y * n + x) as u8, 0, 0]);
            }
        }
        img
    }

    #[test]
    fn op_zero_is_identity() {
        let img = labeled(5);
        assert_eq!(dihedral_transform(&img, 0).unwrap(), img);
    }

    #[test]
    fn ccw_rotation_moves_pixels_as_specified() {
        // Under op 1, src pixel (x, y) must land at (y, W-1-x).
        let n = 3u32;
        let img = labeled(n);
        let rot = dihedral_transform(&img, 1).unwrap();
        for y in 0..n {
            for x in 0..n {
                assert_eq!(rot.get(y, n - 1 - x), img.get(x, y), "src ({x},{y})");
            }
        }
    }

    #[test]
    fn every_op_has_an_inverse_in_the_group() {
        let img = labeled(4);
        for op in 0..8u8 {
            let fwd = dihedral_transform(&img, op).unwrap();
            let inverse = (0..8u8)
                .find(|&inv| dihedral_transform(&fwd, inv).unwrap() == img)
                .expect("no inverse found");
            // Rotations invert to the complementary rotation; reflections
            // are involutions.
            if op >= 4 {
                assert_eq!(inverse, op, "reflections are self-inverse");
            } else {
                assert_eq!(inverse, (4 - op) % 4);
            }
        }
    }

    #[test]
    fn composition_stays_in_the_table() {
        // D4 closure: composing any two ops equals a single tabulated op.
        let img = labeled(5);
        let singles: Vec<RgbImage> = (0..8u8)
            .map(|op| dihedral_transform(&img, op).unwrap())
            .collect();
        for a in 0..8u8 {
            for b in 0..8u8 {
                let ab = dihedral_transform(&singles[a as usize], b).unwrap();
                assert!(
                    singles.contains(&ab),
                    "composition {a} then {b} left the table"
                );
            }
        }
    }

    #[test]
    fn all_eight_ops_are_distinct() {
        let img = labeled(4);
        let outs: Vec<RgbImage> = (0..8u8)
            .map(|op| dihedral_transform(&img, op).unwrap())
            .collect();
        for a in 0..8 {
            for b in (a + 1)..8 {
                assert_ne!(outs[a], outs[b], "ops {a} and {b} coincide");
            }
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(dihedral_transform(&labeled(3), 8).is_err());
        let rect = RgbImage::new(3, 4);
        assert!(dihedral_transform(&rect, 1).is_err());
    }
}
