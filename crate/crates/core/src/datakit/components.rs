//! 8-connected component labelling (two-pass, union-find).

use crate::datakit::image::BinaryMask;

/// Component labels per pixel: 0 is background, foreground components are 1..=count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentLabels {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub count: usize,
}

impl ComponentLabels {
    pub fn label_at(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Mask of component `label` (1-based).
    pub fn component_mask(&self, label: u32) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| self.label_at(y, x) == label)
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }
}

pub fn label_components(mask: &BinaryMask) -> ComponentLabels {
    let (h, w) = mask.dims();
    let mut labels = vec![0u32; h * w];
    let mut sets = DisjointSet { parent: vec![0] };

    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            // Already-visited neighbours: W, NW, N, NE.
            let mut current = 0u32;
            let mut visit = |l: u32, sets: &mut DisjointSet| {
                if l != 0 {
                    if current == 0 {
                        current = l;
                    } else {
                        sets.union(current, l);
                    }
                }
            };
            if x > 0 {
                visit(labels[y * w + x - 1], &mut sets);
            }
            if y > 0 {
                let up = (y - 1) * w;
                if x > 0 {
                    visit(labels[up + x - 1], &mut sets);
                }
                visit(labels[up + x], &mut sets);
                if x + 1 < w {
                    visit(labels[up + x + 1], &mut sets);
                }
            }
            labels[y * w + x] = if current == 0 { sets.make() } else { current };
        }
    }

    // Compact roots to consecutive ids in raster order of first appearance.
    let mut remap = vec![0u32; sets.parent.len()];
    let mut count = 0u32;
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = sets.find(*l) as usize;
        if remap[root] == 0 {
            count += 1;
            remap[root] = count;
        }
        *l = remap[root];
    }

    ComponentLabels {
        width: w,
        height: h,
        labels,
        count: count as usize,
    }
}

/// Number of 8-connected foreground components.
pub fn count_components(mask: &BinaryMask) -> usize {
    label_components(mask).count
}
