use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl Connectivity {
    pub const ALL: [Connectivity; 3] = [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix];

    /// All neighbour offsets `[dz, dy, dx]`.
    pub fn offsets(&self) -> Vec<[isize; 3]> {
        let max_l1 = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let l1 = dz.abs() + dy.abs() + dx.abs();
                    if l1 > 0 && l1 <= max_l1 {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }

    pub fn as_u8(&self) -> u8 {
        match self {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::InvalidArgument(format!("connectivity must be 6, 18 or 26, got {other}"))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        c.as_u8()
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn find(&mut self, mut i: u32) -> u32 {
        while self.parent[i as usize] != i {
            let p = self.parent[i as usize];
            self.parent[i as usize] = self.parent[p as usize];
            i = p;
        }
        i
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Two-pass union-find labelling. Returns a label volume (0 = background,
/// components numbered from 1 in raster order of first voxel) and the voxel
/// count of each component (index `k - 1` for label `k`).
pub fn label_components(mask: &Array3<bool>, connectivity: Connectivity) -> (Array3<u32>, Vec<usize>) {
    let (nz, ny, nx) = mask.dim();
    // only offsets that precede the current voxel in raster order
    let causal: Vec<[isize; 3]> = connectivity
        .offsets()
        .into_iter()
        .filter(|o| (o[0], o[1], o[2]) < (0, 0, 0))
        .collect();
    let mut provisional = Array3::<u32>::zeros((nz, ny, nx));
    let mut set = DisjointSet { parent: vec![0] };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask[[z, y, x]] {
                    continue;
                }
                let mut current = 0u32;
                for o in &causal {
                    let (zz, yy, xx) = (z as isize + o[0], y as isize + o[1], x as isize + o[2]);
                    if zz < 0 || yy < 0 || xx < 0 || yy >= ny as isize || xx >= nx as isize {
                        continue;
                    }
                    let l = provisional[[zz as usize, yy as usize, xx as usize]];
                    if l == 0 {
                        continue;
                    }
                    if current == 0 {
                        current = l;
                    } else if l != current {
                        set.union(current, l);
                    }
                }
                if current == 0 {
                    current = set.parent.len() as u32;
                    set.parent.push(current);
                }
                provisional[[z, y, x]] = current;
            }
        }
    }

    let mut remap = vec![0u32; set.parent.len()];
    let mut sizes: Vec<usize> = Vec::new();
    let mut out = provisional;
    for l in out.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = set.find(*l);
        if remap[root as usize] == 0 {
            sizes.push(0);
            remap[root as usize] = sizes.len() as u32;
        }
        let id = remap[root as usize];
        sizes[id as usize - 1] += 1;
        *l = id;
    }
    (out, sizes)
}
