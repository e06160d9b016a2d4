//! Neighbor graphs over instances: which objects count as "nearby" when the
//! embedding loss pushes cluster means apart.

use crate::datagen::LabelMap;

/// Adjacency sets per instance id. Symmetric and irreflexive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    /// neighbors[id - 1] holds the sorted neighbor ids of instance `id`.
    sets: Vec<Vec<u32>>,
}

impl NeighborGraph {
    pub fn num_instances(&self) -> usize {
        self.sets.len()
    }

    /// Sorted neighbor ids of instance `id` (1-based).
    pub fn neighbors(&self, id: u32) -> &[u32] {
        &self.sets[id as usize - 1]
    }

    pub fn edge_count(&self) -> usize {
        self.sets.iter().map(|s| s.len()).sum::<usize>() / 2
    }

    fn from_pairs(num_instances: usize, mut pairs: Vec<(u32, u32)>) -> Self {
        let mut sets = vec![Vec::new(); num_instances];
        pairs.sort_unstable();
        pairs.dedup();
        for (a, b) in pairs {
            sets[a as usize - 1].push(b);
            sets[b as usize - 1].push(a);
        }
        for s in &mut sets {
            s.sort_unstable();
            s.dedup();
        }
        NeighborGraph { sets }
    }
}

/// Default Chebyshev radius: 10 px on a 64-px side, scaled with the shorter
/// image side.
pub fn default_neighbor_radius(height: usize, width: usize) -> usize {
    let side = height.min(width) as f64;
    ((10.0 * side / 64.0).round() as usize).max(1)
}

/// Connects instances a and b whenever some pixel of a lies within Chebyshev
/// distance `radius` of some pixel of b. Scans each pixel's trailing half
/// window, so every cross-instance pair within the radius is seen once.
pub fn build_neighbor_graph(labels: &LabelMap, radius: usize) -> NeighborGraph {
    assert!(radius >= 1, "radius must be >= 1");
    let (h, w) = (labels.height, labels.width);
    let c = labels.num_instances() as usize;
    let mut pairs = Vec::new();
    for r in 0..h {
        for col in 0..w {
            let a = labels.get(r, col);
            if a == 0 {
                continue;
            }
            // rows strictly below, plus the right side of the current row:
            // the earlier pixel of any pair covers the other direction
            let r_hi = (r + radius).min(h - 1);
            let c_lo = col.saturating_sub(radius);
            let c_hi = (col + radius).min(w - 1);
            for qc in col + 1..=c_hi {
                push_cross(labels.get(r, qc), a, &mut pairs);
            }
            for qr in r + 1..=r_hi {
                for qc in c_lo..=c_hi {
                    push_cross(labels.get(qr, qc), a, &mut pairs);
                }
            }
        }
    }
    NeighborGraph::from_pairs(c, pairs)
}

#[inline]
fn push_cross(b: u32, a: u32, pairs: &mut Vec<(u32, u32)>) {
    if b != 0 && b != a {
        pairs.push((a.min(b), a.max(b)));
    }
}

/// Complete graph on all instances: the "global constraints" alternative
/// where every pair of objects must separate.
pub fn global_graph(labels: &LabelMap) -> NeighborGraph {
    let c = labels.num_instances() as usize;
    let mut sets = Vec::with_capacity(c);
    for id in 1..=c as u32 {
        sets.push((1..=c as u32).filter(|&other| other != id).collect());
    }
    NeighborGraph { sets }
}
