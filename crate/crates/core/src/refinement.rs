//! Writes point features back onto image-plane feature maps.

use crate::error::{dim_err, Result};
use crate::geometry::{CameraIntrinsics, PixelCoord, Point3};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Adds row `j` of `features` onto `map` at point `j`'s level-`level` cell.
/// Points sharing a cell accumulate.
pub fn scatter_add_scale(
    g: &mut Graph,
    map: Var,
    features: Var,
    coords: &[PixelCoord],
    level: usize,
) -> Result<Var> {
    let &[h, w, _] = g.shape(map) else {
        return Err(dim_err!("scatter target must be H×W×C"));
    };
    let index = coords
        .iter()
        .map(|p| {
            let c = p.at_level(level);
            if c.x < w && c.y < h {
                Ok(c.flat(w))
            } else {
                Err(dim_err!("cell ({}, {}) outside {h}×{w}", c.x, c.y))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    g.scatter_add_rows(map, features, index)
}

/// Full-resolution map built from the global point features and the
/// upsampled features.
#[derive(Clone, Debug)]
pub struct GlobalMap {
    pub map: Var,
    /// Upsampled points that landed in the image.
    pub kept_upsampled: usize,
}

/// Zero `H×W×C` map with `f_agg^G` scattered at the radar pixels and the
/// upsampled features scattered at the projections of the (metric)
/// upsampled points. Points behind the camera or outside the image are
/// dropped.
#[allow(clippy::too_many_arguments)]
pub fn build_global_map(
    g: &mut Graph,
    global: Var,
    radar_pixels: &[PixelCoord],
    upsampled: Option<(&[Point3], Var)>,
    intrinsics: &CameraIntrinsics,
    height: usize,
    width: usize,
) -> Result<GlobalMap> {
    let c = g.shape(global)[1];
    let base = g.constant(Tensor::zeros(&[height, width, c]));
    let mut map = scatter_add_scale(g, base, global, radar_pixels, 0)?;
    let mut kept_upsampled = 0;
    if let Some((points, features)) = upsampled {
        if g.shape(features) != [points.len(), c] {
            return Err(dim_err!(
                "upsampled features {:?} for {} points of width {c}",
                g.shape(features),
                points.len()
            ));
        }
        let (rows, pixels): (Vec<usize>, Vec<PixelCoord>) = points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| intrinsics.project_to_pixel(p, height, width).map(|px| (i, px)))
            .unzip();
        kept_upsampled = rows.len();
        if !rows.is_empty() {
            let kept = g.gather_rows(features, rows)?;
            map = scatter_add_scale(g, map, kept, &pixels, 0)?;
        }
    }
    Ok(GlobalMap {
        map,
        kept_upsampled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn px(x: usize, y: usize) -> PixelCoord {
        PixelCoord { x, y }
    }

    #[test]
    fn zero_features_leave_map_unchanged() {
        let mut g = Graph::new();
        let m = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let map = g.constant(m.clone());
        let f = g.constant(Tensor::zeros(&[2, 1]));
        let out = scatter_add_scale(&mut g, map, f, &[px(0, 0), px(3, 3)], 1).unwrap();
        assert_eq!(g.value(out), &m);
    }

    #[test]
    fn shared_cell_accumulates() {
        let mut g = Graph::new();
        let map = g.constant(Tensor::zeros(&[2, 4, 2]));
        let f = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![10.0, 20.0]]).unwrap());
        let out = scatter_add_scale(&mut g, map, f, &[px(32, 0), px(63, 31)], 5).unwrap();
        assert_eq!(g.value(out).at(&[0, 1, 0]), 11.0);
        assert_eq!(g.value(out).at(&[0, 1, 1]), 22.0);
        assert_eq!(g.value(out).sum(), 33.0);
    }

    #[test]
    fn single_point_touches_one_cell() {
        let mut g = Graph::new();
        let map = g.constant(Tensor::zeros(&[4, 4, 3]));
        let f = g.constant(Tensor::full(&[1, 3], 1.0));
        let out = scatter_add_scale(&mut g, map, f, &[px(5, 2)], 1).unwrap();
        let touched = (0..16)
            .filter(|&r| g.value(out).row(r).iter().any(|&v| v != 0.0))
            .collect::<Vec<_>>();
        assert_eq!(touched, vec![4 + 2]);
    }

    #[test]
    fn global_map_drops_invisible_points_and_sums_collisions() {
        let k = CameraIntrinsics::new(10.0, 10.0, 4.0, 4.0).unwrap();
        let mut g = Graph::new();
        let global = g.constant(Tensor::full(&[1, 2], 1.0));
        let up_pts = [[0.0, 0.0, -3.0], [100.0, 0.0, 1.0], [0.0, 0.0, 5.0]];
        let up_f = g.constant(Tensor::full(&[3, 2], 0.5));
        let gm = build_global_map(&mut g, global, &[px(4, 4)], Some((&up_pts, up_f)), &k, 8, 8)
            .unwrap();
        assert_eq!(gm.kept_upsampled, 1);
        assert_eq!(g.value(gm.map).at(&[4, 4, 0]), 1.5);
        assert_eq!(g.value(gm.map).sum(), 3.0);
    }
}
