//! 3D connected-component labeling.
//!
//! Two raster passes with a union-find over provisional labels. Component
//! ids are assigned 1..K in the order their first voxel appears in the
//! raster scan (axis 0 fastest).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Geometry};

/// Voxel adjacency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Connectivity {
    /// Shared face.
    Face6,
    /// Shared face or edge.
    FaceEdge18,
    /// Shared face, edge or corner.
    #[default]
    FaceEdgeCorner26,
}

impl Connectivity {
    pub const ALL: [Connectivity; 3] = [Connectivity::Face6, Connectivity::FaceEdge18, Connectivity::FaceEdgeCorner26];

    pub fn neighbours(self) -> usize {
        match self {
            Connectivity::Face6 => 6,
            Connectivity::FaceEdge18 => 18,
            Connectivity::FaceEdgeCorner26 => 26,
        }
    }

    fn max_nonzero(self) -> usize {
        match self {
            Connectivity::Face6 => 1,
            Connectivity::FaceEdge18 => 2,
            Connectivity::FaceEdgeCorner26 => 3,
        }
    }

    /// All neighbour offsets under this connectivity.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::with_capacity(self.neighbours());
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let nz = (dx != 0) as usize + (dy != 0) as usize + (dz != 0) as usize;
                    if nz >= 1 && nz <= self.max_nonzero() {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }

    /// Offsets that precede the current voxel in raster order.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        self.offsets()
            .into_iter()
            .filter(|&[dx, dy, dz]| dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0))))
            .collect()
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.neighbours())
    }
}

impl Serialize for Connectivity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Connectivity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "6" => Ok(Connectivity::Face6),
            "18" => Ok(Connectivity::FaceEdge18),
            "26" => Ok(Connectivity::FaceEdgeCorner26),
            other => Err(Error::param(format!("connectivity must be 6, 18 or 26, got '{other}'"))),
        }
    }
}

/// Labeled components of a binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSet {
    pub geometry: Geometry,
    /// Per-voxel component id; 0 is background.
    pub labels: Vec<u32>,
    /// `sizes[k]` is the voxel count of component `k + 1`.
    pub sizes: Vec<usize>,
    pub volumes_ml: Vec<f64>,
}

impl ComponentSet {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Mask of component `id` (1-based).
    pub fn component_mask(&self, id: u32) -> BinaryMask {
        BinaryMask::new(self.geometry, self.labels.iter().map(|&l| l == id).collect())
            .expect("labels match geometry")
    }

    /// For each component, whether any of its voxels satisfies `hit`.
    pub fn touched_by(&self, hit: impl Fn(usize) -> bool) -> Vec<bool> {
        let mut touched = vec![false; self.count()];
        for (i, &l) in self.labels.iter().enumerate() {
            if l != 0 && !touched[l as usize - 1] && hit(i) {
                touched[l as usize - 1] = true;
            }
        }
        touched
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn with_capacity(n: usize) -> Self {
        // Slot 0 is unused so provisional labels can start at 1.
        let mut parent = Vec::with_capacity(n + 1);
        parent.push(0);
        UnionFind { parent }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        while self.parent[x as usize] != root {
            let next = self.parent[x as usize];
            self.parent[x as usize] = root;
            x = next;
        }
        root
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (ra, rb) = (self.find(a), self.find(b));
        // Smaller root wins so the earliest provisional label stays representative.
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
        lo
    }
}

pub fn label_components(mask: &BinaryMask, conn: Connectivity) -> ComponentSet {
    let geometry = *mask.geometry();
    let [nx, ny, nz] = geometry.dims;
    let fg = mask.data();
    let back = conn.backward_offsets();
    let mut provisional = vec![0u32; fg.len()];
    let mut uf = UnionFind::with_capacity(64);

    let mut idx = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if fg[idx] {
                    let mut current = 0u32;
                    for &[dx, dy, dz] in &back {
                        let (xx, yy, zz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                        if xx < 0 || yy < 0 || zz < 0 || xx >= nx as isize || yy >= ny as isize {
                            continue;
                        }
                        let n = provisional[geometry.index(xx as usize, yy as usize, zz as usize)];
                        if n == 0 {
                            continue;
                        }
                        current = if current == 0 { uf.find(n) } else { uf.union(current, n) };
                    }
                    provisional[idx] = if current == 0 { uf.make() } else { current };
                }
                idx += 1;
            }
        }
    }

    // Second pass: resolve roots and renumber in first-seen order.
    let mut final_id = vec![0u32; uf.parent.len()];
    let mut sizes: Vec<usize> = Vec::new();
    let mut labels = provisional;
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = uf.find(*l) as usize;
        if final_id[root] == 0 {
            sizes.push(0);
            final_id[root] = sizes.len() as u32;
        }
        let id = final_id[root];
        sizes[id as usize - 1] += 1;
        *l = id;
    }
    let voxel_ml = geometry.voxel_volume_ml();
    let volumes_ml = sizes.iter().map(|&s| s as f64 * voxel_ml).collect();
    ComponentSet {
        geometry,
        labels,
        sizes,
        volumes_ml,
    }
}
