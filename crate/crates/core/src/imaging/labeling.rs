use ndarray::Array2;

use super::{BinaryMask, BoundingBox, Candidate, ComponentMap, Connectivity};

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let up = parent[parent[x as usize] as usize];
        parent[x as usize] = up;
        x = up;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass union-find labelling. Final labels follow raster-scan order of
/// each component's first pixel, starting at 1.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentMap {
    let (h, w) = mask.pixels.dim();
    let mut provisional = Array2::<u32>::zeros((h, w));
    // parent[0] is the background sentinel.
    let mut parent: Vec<u32> = vec![0];

    // Already-visited neighbours in raster order.
    let back: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (0, -1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
    };

    for r in 0..h {
        for c in 0..w {
            if !mask.pixels[[r, c]] {
                continue;
            }
            let mut current = 0u32;
            for &(dr, dc) in back {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || cc < 0 || cc >= w as isize {
                    continue;
                }
                let n = provisional[[rr as usize, cc as usize]];
                if n == 0 {
                    continue;
                }
                if current == 0 {
                    current = n;
                } else {
                    union(&mut parent, current, n);
                }
            }
            if current == 0 {
                current = parent.len() as u32;
                parent.push(current);
            }
            provisional[[r, c]] = current;
        }
    }

    let mut remap = vec![0u32; parent.len()];
    let mut count = 0u32;
    let mut labels = Array2::<u32>::zeros((h, w));
    for ((r, c), &p) in provisional.indexed_iter() {
        if p == 0 {
            continue;
        }
        let root = find(&mut parent, p) as usize;
        if remap[root] == 0 {
            count += 1;
            remap[root] = count;
        }
        labels[[r, c]] = remap[root];
    }
    ComponentMap { labels, count }
}

/// Area, binary centroid and tight bounding box of every component, in label order.
pub fn measure_candidates(cmap: &ComponentMap) -> Vec<Candidate> {
    struct Acc {
        area: usize,
        sum_r: f64,
        sum_c: f64,
        min_r: usize,
        max_r: usize,
        min_c: usize,
        max_c: usize,
    }
    let mut acc: Vec<Acc> = (0..cmap.count)
        .map(|_| Acc {
            area: 0,
            sum_r: 0.0,
            sum_c: 0.0,
            min_r: usize::MAX,
            max_r: 0,
            min_c: usize::MAX,
            max_c: 0,
        })
        .collect();
    for ((r, c), &l) in cmap.labels.indexed_iter() {
        if l == 0 {
            continue;
        }
        let a = &mut acc[l as usize - 1];
        a.area += 1;
        a.sum_r += r as f64;
        a.sum_c += c as f64;
        a.min_r = a.min_r.min(r);
        a.max_r = a.max_r.max(r);
        a.min_c = a.min_c.min(c);
        a.max_c = a.max_c.max(c);
    }
    acc.into_iter()
        .enumerate()
        .filter(|(_, a)| a.area > 0)
        .map(|(i, a)| Candidate {
            label: i as u32 + 1,
            area: a.area,
            centroid: (a.sum_r / a.area as f64, a.sum_c / a.area as f64),
            bbox: BoundingBox {
                top: a.min_r,
                left: a.min_c,
                height: a.max_r - a.min_r + 1,
                width: a.max_c - a.min_c + 1,
            },
        })
        .collect()
}
