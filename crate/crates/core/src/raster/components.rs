use serde::{Deserialize, Serialize};

use super::{BitMask, Grid, InstanceMap};

/// Pixel adjacency used for component labelling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    pub fn from_number(n: u32) -> Option<Self> {
        match n {
            4 => Some(Connectivity::Four),
            8 => Some(Connectivity::Eight),
            _ => None,
        }
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new() -> Self {
        // slot 0 is the background sentinel
        DisjointSet { parent: vec![0] }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    /// Union keeping the smaller root, so a set's root is its earliest label.
    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
        lo
    }
}

/// Labels connected true-regions; returns the id raster and the number of
/// components. Ids start at 1 in raster-scan order of each component's first
/// pixel.
pub(crate) fn label(mask: &BitMask, connectivity: Connectivity) -> (Grid<u32>, u32) {
    let (w, h) = mask.dims();
    let bits = mask.as_slice();
    let mut labels = vec![0u32; w * h];
    let mut ds = DisjointSet::new();

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !bits[i] {
                continue;
            }
            let mut current = 0u32;
            let mut consider = |n: u32, ds: &mut DisjointSet| {
                if n != 0 {
                    current = if current == 0 { ds.find(n) } else { ds.union(current, n) };
                }
            };
            if x > 0 {
                consider(labels[i - 1], &mut ds);
            }
            if y > 0 {
                consider(labels[i - w], &mut ds);
                if connectivity == Connectivity::Eight {
                    if x > 0 {
                        consider(labels[i - w - 1], &mut ds);
                    }
                    if x + 1 < w {
                        consider(labels[i - w + 1], &mut ds);
                    }
                }
            }
            labels[i] = if current == 0 { ds.make() } else { current };
        }
    }

    let mut remap = vec![0u32; ds.parent.len()];
    let mut next = 0u32;
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = ds.find(*l);
        if remap[root as usize] == 0 {
            next += 1;
            remap[root as usize] = next;
        }
        *l = remap[root as usize];
    }
    (Grid::from_vec(w, h, labels).expect("same dimensions"), next)
}

/// Connected-component labelling with per-component pixel counts and centroids.
pub fn connected_components(mask: &BitMask, connectivity: Connectivity) -> InstanceMap {
    let (ids, _) = label(mask, connectivity);
    InstanceMap::from_ids(ids, |_| (None, None))
}
