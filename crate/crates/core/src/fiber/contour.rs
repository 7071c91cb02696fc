//! Marching squares on the bilinear interpolant of a [`ScalarField`].

use std::collections::HashMap;

use crate::field::ScalarField;
use crate::models::Point;

/// Raw polylines of the level set `{f = level}`, each as an ordered vertex
/// list plus a flag telling whether it closes on itself.
pub(crate) fn trace_level_set(field: &ScalarField, level: f64) -> Vec<(Vec<Point>, bool)> {
    let grid = field.grid();
    let (nx, ny) = (grid.nx(), grid.ny());
    let horizontal = (nx - 1) * ny;
    let h_key = |i: usize, j: usize| i + (nx - 1) * j;
    let v_key = |i: usize, j: usize| horizontal + i + nx * j;

    let crossing = |a: (usize, usize), b: (usize, usize)| -> Point {
        let (pa, pb) = (grid.center_of(a.0, a.1), grid.center_of(b.0, b.1));
        let (fa, fb) = (field.value(a.0, a.1), field.value(b.0, b.1));
        let t = (level - fa) / (fb - fa);
        [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])]
    };

    let mut points: HashMap<usize, Point> = HashMap::new();
    let mut segments: Vec<(usize, usize)> = Vec::new();

    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let f00 = field.value(i, j);
            let f10 = field.value(i + 1, j);
            let f11 = field.value(i + 1, j + 1);
            let f01 = field.value(i, j + 1);
            let above = [f00 > level, f10 > level, f11 > level, f01 > level];
            // Edges in counter-clockwise order: bottom, right, top, left.
            let edges = [h_key(i, j), v_key(i + 1, j), h_key(i, j + 1), v_key(i, j)];
            let ends = [
                ((i, j), (i + 1, j)),
                ((i + 1, j), (i + 1, j + 1)),
                ((i, j + 1), (i + 1, j + 1)),
                ((i, j), (i, j + 1)),
            ];
            let cut = [
                above[0] != above[1],
                above[1] != above[2],
                above[2] != above[3],
                above[3] != above[0],
            ];
            let mut hit = Vec::with_capacity(4);
            for e in 0..4 {
                if cut[e] {
                    points
                        .entry(edges[e])
                        .or_insert_with(|| crossing(ends[e].0, ends[e].1));
                    hit.push(e);
                }
            }
            match hit.len() {
                0 => {}
                2 => segments.push((edges[hit[0]], edges[hit[1]])),
                4 => {
                    // Saddle: corners sharing the center's class stay connected,
                    // the other two are cut off by their own segments.
                    let center = 0.25 * (f00 + f10 + f11 + f01) > level;
                    // Corner c touches edges (c - 1) mod 4 and c.
                    for c in 0..4 {
                        if above[c] != center {
                            segments.push((edges[(c + 3) % 4], edges[c]));
                        }
                    }
                }
                _ => unreachable!("a square has an even number of sign changes"),
            }
        }
    }

    chain(&points, &segments)
}

fn chain(points: &HashMap<usize, Point>, segments: &[(usize, usize)]) -> Vec<(Vec<Point>, bool)> {
    let mut incident: HashMap<usize, Vec<usize>> = HashMap::new();
    for (s, &(a, b)) in segments.iter().enumerate() {
        incident.entry(a).or_default().push(s);
        incident.entry(b).or_default().push(s);
    }
    let mut used = vec![false; segments.len()];
    let mut out = Vec::new();

    let walk = |start_edge: usize, used: &mut Vec<bool>| -> (Vec<usize>, bool) {
        let mut keys = vec![start_edge];
        let mut current = start_edge;
        loop {
            let next = incident[&current].iter().copied().find(|&s| !used[s]);
            let Some(s) = next else { break };
            used[s] = true;
            let (a, b) = segments[s];
            current = if a == current { b } else { a };
            keys.push(current);
        }
        let closed = keys.len() > 2 && keys.first() == keys.last();
        (keys, closed)
    };

    // Open chains start at edges touched by a single segment.
    let mut starts: Vec<usize> = incident
        .iter()
        .filter(|(_, segs)| segs.len() == 1)
        .map(|(&k, _)| k)
        .collect();
    starts.sort_unstable();
    for k in starts {
        if incident[&k].iter().all(|&s| used[s]) {
            continue;
        }
        let (keys, closed) = walk(k, &mut used);
        out.push((to_points(points, &keys), closed));
    }
    for s in 0..segments.len() {
        if !used[s] {
            let (keys, closed) = walk(segments[s].0, &mut used);
            out.push((to_points(points, &keys), closed));
        }
    }
    out
}

fn to_points(points: &HashMap<usize, Point>, keys: &[usize]) -> Vec<Point> {
    let mut v: Vec<Point> = Vec::with_capacity(keys.len());
    for k in keys {
        let p = points[k];
        if v.last().is_some_and(|q| q[0] == p[0] && q[1] == p[1]) {
            continue;
        }
        v.push(p);
    }
    v
}
