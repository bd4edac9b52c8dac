//! Grayscale montages written as binary PGM.

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Tiles the mid slices of `tiles` row-major into `cols` columns with a
/// one-pixel black border. Intensities are clamped to `[0, 1]`.
pub fn montage(tiles: &[Grid], cols: usize) -> Result<(usize, usize, Vec<u8>)> {
    if tiles.is_empty() || cols == 0 {
        return Err(Error::usage("a montage needs at least one tile and one column"));
    }
    let slices: Vec<Grid> = tiles.iter().map(|t| t.mid_slice()).collect();
    let [_, th, tw] = slices[0].shape();
    if slices.iter().any(|s| s.shape() != slices[0].shape()) {
        return Err(Error::usage("montage tiles must share one shape"));
    }
    let cols = cols.min(slices.len());
    let rows = slices.len().div_ceil(cols);
    let (w, h) = (cols * (tw + 1) + 1, rows * (th + 1) + 1);
    let mut px = vec![0u8; w * h];
    for (i, s) in slices.iter().enumerate() {
        let (oy, ox) = ((i / cols) * (th + 1) + 1, (i % cols) * (tw + 1) + 1);
        for y in 0..th {
            for x in 0..tw {
                let v = s.get(0, y, x).clamp(0.0, 1.0);
                px[(oy + y) * w + ox + x] = (v * 255.0).round() as u8;
            }
        }
    }
    Ok((w, h, px))
}

/// Binary PGM (`P5`, maxval 255) with one comment line per entry.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8], comments: &[String]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::usage("pixel count does not match the image size"));
    }
    let mut out = b"P5\n".to_vec();
    for c in comments {
        if c.contains('\n') {
            return Err(Error::usage("PGM comments must be single lines"));
        }
        out.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    out.extend_from_slice(format!("{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(pixels);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_land_inside_borders() {
        let a = Grid::filled(2, [1, 2, 3], 1.0).unwrap();
        let b = Grid::filled(2, [1, 2, 3], 0.5).unwrap();
        let (w, h, px) = montage(&[a.clone(), b, a], 2).unwrap();
        assert_eq!((w, h), (9, 7));
        assert_eq!(px[w + 1], 255);
        assert_eq!(px[w + 5], 128);
        assert_eq!(px[w + 4], 0);
        assert_eq!(px[4 * w + 1], 255);
        assert_eq!(px[4 * w + 5], 0);
    }

    #[test]
    fn pgm_header_is_well_formed() {
        let b = pgm_bytes(2, 1, &[0, 255], &["seed=3".into()]).unwrap();
        assert_eq!(&b[..], b"P5\n# seed=3\n2 1\n255\n\x00\xff");
        assert!(pgm_bytes(2, 2, &[0], &[]).is_err());
    }
}
