//! Mesh geometry: PE coordinates, links, dimension-ordered routes, and the
//! central tree roots used by the key/value delivery flow.

use serde::{Deserialize, Serialize};

/// One processing engine on the m×m grid. `x` indexes movement along the
/// X-axis, `y` along the Y-axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pe {
    pub x: u8,
    pub y: u8,
}

impl Pe {
    pub fn new(x: u8, y: u8) -> Self {
        Self { x, y }
    }

    /// Row-major linear index.
    pub fn index(&self, side: usize) -> usize {
        self.x as usize * side + self.y as usize
    }

    pub fn from_index(idx: usize, side: usize) -> Self {
        Self { x: (idx / side) as u8, y: (idx % side) as u8 }
    }

    pub fn manhattan(&self, other: &Pe) -> u32 {
        (self.x as i32 - other.x as i32).unsigned_abs()
            + (self.y as i32 - other.y as i32).unsigned_abs()
    }
}

/// The two independent NoC planes of a device. Partial-sum exchange runs on
/// the inter-PE plane; prompt KV and inter-device traffic on the router plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Plane {
    InterPe,
    Router,
}

/// Axis of a 1D collective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub fn other(self) -> Axis {
        match self {
            Axis::X => Axis::Y,
            Axis::Y => Axis::X,
        }
    }
}

/// Directed link between adjacent PEs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Link {
    pub from: Pe,
    pub to: Pe,
}

impl Link {
    /// Axis the link runs along.
    pub fn axis(&self) -> Axis {
        if self.from.x != self.to.x {
            Axis::X
        } else {
            Axis::Y
        }
    }
}

/// Per-plane link timing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NocPlaneConfig {
    /// Bytes per cycle per directed link.
    pub link_bandwidth: f64,
    /// Cycles per hop.
    pub hop_latency: f64,
}

/// The m×m mesh with its two NoC planes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshConfig {
    /// PEs per side.
    pub side: usize,
    pub inter_pe: NocPlaneConfig,
    pub router: NocPlaneConfig,
}

impl MeshConfig {
    pub fn new(side: usize, link_bandwidth: f64, hop_latency: f64) -> Self {
        let plane = NocPlaneConfig { link_bandwidth, hop_latency };
        Self { side, inter_pe: plane, router: plane }
    }

    pub fn plane(&self, plane: Plane) -> NocPlaneConfig {
        match plane {
            Plane::InterPe => self.inter_pe,
            Plane::Router => self.router,
        }
    }

    pub fn pe_count(&self) -> usize {
        self.side * self.side
    }

    pub fn pes(&self) -> impl Iterator<Item = Pe> + '_ {
        let side = self.side;
        (0..side as u8).flat_map(move |x| (0..side as u8).map(move |y| Pe::new(x, y)))
    }

    pub fn contains(&self, pe: Pe) -> bool {
        (pe.x as usize) < self.side && (pe.y as usize) < self.side
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.side == 0 {
            return Err("mesh side must be >= 1".into());
        }
        if self.side > u8::MAX as usize {
            return Err("mesh side too large".into());
        }
        for p in [self.inter_pe, self.router] {
            if p.link_bandwidth <= 0.0 || p.hop_latency <= 0.0 {
                return Err("link bandwidth and hop latency must be positive".into());
            }
        }
        Ok(())
    }

    /// Central indices along one axis: the symmetric pair for even side,
    /// the single middle index for odd side.
    pub fn central_indices(&self) -> Vec<u8> {
        central_indices(self.side)
    }

    /// The central PEs used as tree roots (cartesian product of the central
    /// indices on both axes).
    pub fn central_pes(&self) -> Vec<Pe> {
        let c = self.central_indices();
        let mut out = Vec::new();
        for &x in &c {
            for &y in &c {
                out.push(Pe::new(x, y));
            }
        }
        out
    }

    /// Manhattan distance from `pe` to its nearest central PE.
    pub fn center_distance(&self, pe: Pe) -> u32 {
        self.central_pes()
            .iter()
            .map(|c| pe.manhattan(c))
            .min()
            .unwrap_or(0)
    }

    /// The central index nearest to `coord`; ties go to the lower index.
    pub fn nearest_central(&self, coord: u8) -> u8 {
        let mut best = 0u8;
        let mut best_d = u32::MAX;
        for &c in &self.central_indices() {
            let d = (c as i32 - coord as i32).unsigned_abs();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }
}

/// Central indices of a line of `side` nodes.
pub fn central_indices(side: usize) -> Vec<u8> {
    if side == 1 {
        vec![0]
    } else if side % 2 == 0 {
        vec![(side / 2 - 1) as u8, (side / 2) as u8]
    } else {
        vec![(side / 2) as u8]
    }
}

/// Shortest X-then-Y route from `src` to `dst`, inclusive of both endpoints.
pub fn route_x_then_y(src: Pe, dst: Pe) -> Vec<Pe> {
    let mut path = vec![src];
    let mut cur = src;
    while cur.x != dst.x {
        cur.x = if dst.x > cur.x { cur.x + 1 } else { cur.x - 1 };
        path.push(cur);
    }
    while cur.y != dst.y {
        cur.y = if dst.y > cur.y { cur.y + 1 } else { cur.y - 1 };
        path.push(cur);
    }
    path
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_indices_even_odd() {
        assert_eq!(central_indices(1), vec![0]);
        assert_eq!(central_indices(2), vec![0, 1]);
        assert_eq!(central_indices(3), vec![1]);
        assert_eq!(central_indices(4), vec![1, 2]);
        assert_eq!(central_indices(8), vec![3, 4]);
    }

    #[test]
    fn central_pair_symmetric_about_midline() {
        for side in [2usize, 4, 8, 16] {
            let c = central_indices(side);
            assert_eq!(c.len(), 2);
            assert_eq!(c[0] as usize + c[1] as usize, side - 1);
        }
    }

    #[test]
    fn center_distance_example() {
        // On 4×4 the nearest central PE to (0,0) is (1,1): distance 2.
        let mesh = MeshConfig::new(4, 32.0, 2.0);
        assert_eq!(mesh.center_distance(Pe::new(0, 0)), 2);
        assert_eq!(mesh.center_distance(Pe::new(1, 1)), 0);
        assert_eq!(mesh.center_distance(Pe::new(3, 0)), 2);
    }

    #[test]
    fn route_is_x_then_y() {
        let path = route_x_then_y(Pe::new(0, 0), Pe::new(2, 1));
        assert_eq!(
            path,
            vec![Pe::new(0, 0), Pe::new(1, 0), Pe::new(2, 0), Pe::new(2, 1)]
        );
        assert_eq!(route_x_then_y(Pe::new(1, 1), Pe::new(1, 1)), vec![Pe::new(1, 1)]);
    }

    #[test]
    fn nearest_central_prefers_lower_on_tie() {
        let mesh = MeshConfig::new(4, 32.0, 2.0);
        assert_eq!(mesh.nearest_central(0), 1);
        assert_eq!(mesh.nearest_central(1), 1);
        assert_eq!(mesh.nearest_central(2), 2);
        assert_eq!(mesh.nearest_central(3), 2);
    }
}
