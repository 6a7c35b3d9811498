//! Experimental vectorisation of class rasters: 8-connected components,
//! Zhang–Suen thinning, and a nearest-neighbour walk over skeleton cells.

use super::chamfer::Instance;
use super::Class;
use crate::error::{dim_err, Result};
use crate::geo::Point2;

const NEIGHBOURS: [(isize, isize); 8] = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)];

/// Zhang–Suen thinning of a binary `h×w` mask.
pub fn thin(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut m = mask.to_vec();
    let at = |m: &[bool], r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && m[r as usize * w + c as usize]
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for r in 0..h as isize {
                for c in 0..w as isize {
                    if !at(&m, r, c) {
                        continue;
                    }
                    let p: Vec<bool> = NEIGHBOURS.iter().map(|&(dr, dc)| at(&m, r + dr, c + dc)).collect();
                    let b = p.iter().filter(|&&x| x).count();
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    // p[0]=N, p[2]=E, p[4]=S, p[6]=W
                    let cond = if pass == 0 {
                        !(p[0] && p[2] && p[4]) && !(p[2] && p[4] && p[6])
                    } else {
                        !(p[0] && p[2] && p[6]) && !(p[0] && p[4] && p[6])
                    };
                    if (2..=6).contains(&b) && a == 1 && cond {
                        remove.push(r as usize * w + c as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for i in remove {
                m[i] = false;
            }
        }
        if !changed {
            return m;
        }
    }
}

fn components(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut label = vec![usize::MAX; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut stack = vec![start];
        label[start] = id;
        let mut cells = Vec::new();
        while let Some(i) = stack.pop() {
            cells.push(i);
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for (dr, dc) in NEIGHBOURS {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr as usize >= h || nc as usize >= w {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if mask[j] && label[j] == usize::MAX {
                    label[j] = id;
                    stack.push(j);
                }
            }
        }
        cells.sort_unstable();
        out.push(cells);
    }
    out
}

/// Orders skeleton cells by walking to the nearest unvisited cell, starting
/// from an end point when one exists.
fn order_cells(cells: &[usize], w: usize) -> Vec<usize> {
    let pos = |i: usize| ((i / w) as f64, (i % w) as f64);
    let adjacent = |a: usize, b: usize| {
        let (pa, pb) = (pos(a), pos(b));
        (pa.0 - pb.0).abs() <= 1.0 && (pa.1 - pb.1).abs() <= 1.0 && a != b
    };
    let start = cells
        .iter()
        .copied()
        .find(|&a| cells.iter().filter(|&&b| adjacent(a, b)).count() <= 1)
        .unwrap_or(cells[0]);
    let mut left: Vec<usize> = cells.iter().copied().filter(|&c| c != start).collect();
    let mut path = vec![start];
    while !left.is_empty() {
        let cur = pos(*path.last().expect("non-empty path"));
        let (k, _) = left
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let p = pos(c);
                (k, (p.0 - cur.0).powi(2) + (p.1 - cur.1).powi(2))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("non-empty");
        path.push(left.remove(k));
    }
    path
}

/// Vectorises every foreground class of an `h×w` class raster.
///
/// `cell_m` is the cell size (row, col) in meters; points are cell centres
/// in `(col·cw, row·ch)` meters. `probs`, when given as `[K×H×W]`
/// probabilities, sets each instance's score to its mean class probability;
/// otherwise scores are 1.
pub fn extract_instances(
    classes: &[u8],
    h: usize,
    w: usize,
    cell_m: (f64, f64),
    probs: Option<&[f32]>,
    min_cells: usize,
) -> Result<Vec<Instance>> {
    if classes.len() != h * w {
        return Err(dim_err!("class raster has {} cells, expected {h}x{w}", classes.len()));
    }
    if let Some(p) = probs {
        if p.len() != Class::COUNT * h * w {
            return Err(dim_err!("probabilities have {} entries for {h}x{w}", p.len()));
        }
    }
    let mut out = Vec::new();
    for class in Class::FOREGROUND {
        let mask: Vec<bool> = classes.iter().map(|&k| k == class as u8).collect();
        for comp in components(&mask, h, w) {
            if comp.len() < min_cells.max(1) {
                continue;
            }
            let mut sub = vec![false; h * w];
            comp.iter().for_each(|&i| sub[i] = true);
            let skel = thin(&sub, h, w);
            let mut cells: Vec<usize> = (0..h * w).filter(|&i| skel[i]).collect();
            if cells.is_empty() {
                cells = comp.clone();
            }
            let points: Vec<Point2> = order_cells(&cells, w)
                .into_iter()
                .map(|i| [((i % w) as f64 + 0.5) * cell_m.1, ((i / w) as f64 + 0.5) * cell_m.0])
                .collect();
            let score = match probs {
                Some(p) => {
                    let base = class as usize * h * w;
                    comp.iter().map(|&i| p[base + i] as f64).sum::<f64>() / comp.len() as f64
                }
                None => 1.0,
            };
            out.push(Instance::new(class, points, score));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thick_bar_thins_to_a_line() {
        let (h, w) = (7, 12);
        let mask: Vec<bool> = (0..h * w)
            .map(|i| (2..5).contains(&(i / w)) && (1..11).contains(&(i % w)))
            .collect();
        let s = thin(&mask, h, w);
        let n = s.iter().filter(|&&x| x).count();
        assert!(n >= 6 && n <= 10, "skeleton has {n} cells");
        for r in 0..h {
            for c in 0..w {
                if s[r * w + c] {
                    assert!(mask[r * w + c]);
                }
            }
        }
    }

    #[test]
    fn separate_lines_become_separate_instances() {
        let (h, w) = (6, 10);
        let mut classes = vec![0u8; h * w];
        for c in 0..w {
            classes[w + c] = Class::Divider as u8;
            classes[4 * w + c] = Class::Boundary as u8;
        }
        let inst = extract_instances(&classes, h, w, (1.5, 1.5), None, 2).unwrap();
        assert_eq!(inst.len(), 2);
        assert_eq!(inst[0].class, Class::Divider);
        assert_eq!(inst[0].points.len(), w);
        assert!(inst[0]
            .points
            .windows(2)
            .all(|p| (p[1][0] - p[0][0]).abs() <= 1.5 + 1e-9));
    }
}
