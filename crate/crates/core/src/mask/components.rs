//! Two-pass connected-component labeling with a union-find table.

use super::BinaryMask2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new() -> Self {
        // slot 0 is background
        UnionFind { parent: vec![0] }
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
        let ra = self.find(a);
        let rb = self.find(b);
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
        lo
    }
}

/// Region labels for a mask. Label 0 is background; regions are numbered
/// from 1 in the order their first pixel appears in a row-major scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, col: usize, row: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// Pixel count of region `id` (1-based).
    pub fn size(&self, id: u32) -> usize {
        self.sizes[id as usize - 1]
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn region(&self, id: u32) -> BinaryMask2D {
        BinaryMask2D::from_bits(
            self.width,
            self.height,
            self.labels.iter().map(|&l| l == id).collect(),
        )
        .expect("label grid matches dims")
    }
}

pub fn connected_components(mask: &BinaryMask2D, connectivity: Connectivity) -> Components {
    let (w, h) = mask.dims();
    let mut provisional = vec![0u32; w * h];
    let mut uf = UnionFind::new();

    for row in 0..h {
        for col in 0..w {
            if !mask.get(col, row) {
                continue;
            }
            let mut neighbors = [0u32; 4];
            let mut n = 0;
            let mut push = |c: usize, r: usize| {
                let l = provisional[r * w + c];
                if l != 0 {
                    neighbors[n] = l;
                    n += 1;
                }
            };
            if col > 0 {
                push(col - 1, row);
            }
            if row > 0 {
                push(col, row - 1);
                if connectivity == Connectivity::Eight {
                    if col > 0 {
                        push(col - 1, row - 1);
                    }
                    if col + 1 < w {
                        push(col + 1, row - 1);
                    }
                }
            }
            let label = if n == 0 {
                uf.make()
            } else {
                let mut root = neighbors[0];
                for &l in &neighbors[1..n] {
                    root = uf.union(root, l);
                }
                uf.find(root)
            };
            provisional[row * w + col] = label;
        }
    }

    let mut remap = vec![0u32; uf.parent.len()];
    let mut sizes = Vec::new();
    let mut labels = vec![0u32; w * h];
    for (i, &p) in provisional.iter().enumerate() {
        if p == 0 {
            continue;
        }
        let root = uf.find(p) as usize;
        if remap[root] == 0 {
            sizes.push(0);
            remap[root] = sizes.len() as u32;
        }
        let id = remap[root];
        sizes[id as usize - 1] += 1;
        labels[i] = id;
    }

    Components {
        width: w,
        height: h,
        labels,
        sizes,
    }
}

/// The largest 8-connected region; ties go to the region found first.
pub fn largest_component(mask: &BinaryMask2D) -> BinaryMask2D {
    let cc = connected_components(mask, Connectivity::Eight);
    let mut best: Option<(usize, u32)> = None;
    for (i, &s) in cc.sizes.iter().enumerate() {
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, i as u32 + 1));
        }
    }
    match best {
        Some((_, id)) => cc.region(id),
        None => BinaryMask2D::new(mask.width(), mask.height()),
    }
}
