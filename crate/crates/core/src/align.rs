//! Monotone sequence alignment by dynamic programming.
//!
//! [`dtw`] enforces both boundary conditions (first and last units of both
//! sequences are matched). [`otam`] relaxes the boundary on the clip axis:
//! the path may enter the first row at any column and leave the last row at
//! any column, which is what padding the clip sequence with neutral units at
//! both ends amounts to. Every row is still matched.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcore::{similarity_matrix, EmbeddingSequence};

/// Largest matrix (in cells) the exhaustive oracle accepts.
pub const BRUTE_FORCE_MAX_CELLS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Dtw,
    Otam,
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Measure::Dtw => "dtw",
            Measure::Otam => "otam",
        })
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dtw" => Ok(Measure::Dtw),
            "otam" => Ok(Measure::Otam),
            other => Err(Error::InvalidArgument(format!("unknown measure `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentResult {
    /// Minimum cumulative cost `C(i, j)`.
    pub cumulative: Array2<f64>,
    /// Matched `(row, column)` cells in path order.
    pub path: Vec<(usize, usize)>,
    /// Total cost along the path.
    pub distance: f64,
    /// Summed similarity `1 - D(i, j)` along the path, divided by the path
    /// length when normalized.
    pub score: f64,
}

impl AlignmentResult {
    /// Binary matching matrix of the given shape.
    pub fn matching_matrix(&self, rows: usize, cols: usize) -> Array2<u8> {
        let mut m = Array2::zeros((rows, cols));
        for &(i, j) in &self.path {
            m[[i, j]] = 1;
        }
        m
    }
}

fn check_costs(d: &Array2<f64>) -> Result<()> {
    if d.is_empty() {
        return Err(Error::Empty("cost matrix".into()));
    }
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    Ok(())
}

fn path_score(d: &Array2<f64>, path: &[(usize, usize)]) -> f64 {
    path.iter().map(|&(i, j)| 1.0 - d[[i, j]]).sum()
}

/// Predecessor with the smallest cumulative cost; ties prefer the diagonal,
/// then the vertical step, then the horizontal one.
fn best_predecessor(c: &Array2<f64>, i: usize, j: usize) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    let mut consider = |cell: (usize, usize)| {
        let v = c[cell];
        if v.is_finite() && best.is_none_or(|(_, b)| v < b) {
            best = Some((cell, v));
        }
    };
    if i > 0 && j > 0 {
        consider((i - 1, j - 1));
    }
    if i > 0 {
        consider((i - 1, j));
    }
    if j > 0 {
        consider((i, j - 1));
    }
    best.map(|(cell, _)| cell)
}

fn fill(d: &Array2<f64>, free_start: bool) -> Array2<f64> {
    let (rows, cols) = d.dim();
    let mut c = Array2::from_elem((rows, cols), f64::INFINITY);
    for i in 0..rows {
        for j in 0..cols {
            let prev = if i == 0 && (j == 0 || free_start) {
                0.0
            } else {
                best_predecessor(&c, i, j).map_or(f64::INFINITY, |p| c[p])
            };
            c[[i, j]] = d[[i, j]] + prev;
        }
    }
    c
}

fn backtrack(c: &Array2<f64>, end: (usize, usize), free_start: bool) -> Vec<(usize, usize)> {
    let mut path = vec![end];
    let (mut i, mut j) = end;
    loop {
        if i == 0 && (j == 0 || free_start) {
            break;
        }
        let (pi, pj) = best_predecessor(c, i, j).expect("finite cell has a predecessor");
        i = pi;
        j = pj;
        path.push((i, j));
    }
    path.reverse();
    path
}

/// Exact dynamic time warping over a cost matrix.
pub fn dtw(d: &Array2<f64>) -> Result<AlignmentResult> {
    check_costs(d)?;
    let (rows, cols) = d.dim();
    let cumulative = fill(d, false);
    let end = (rows - 1, cols - 1);
    let path = backtrack(&cumulative, end, false);
    Ok(AlignmentResult {
        distance: cumulative[end],
        score: path_score(d, &path),
        cumulative,
        path,
    })
}

/// Subsequence alignment with free start and end on the clip (column) axis.
pub fn otam(d: &Array2<f64>) -> Result<AlignmentResult> {
    check_costs(d)?;
    let (rows, cols) = d.dim();
    let cumulative = fill(d, true);
    let last = rows - 1;
    let mut end_col = 0;
    for j in 1..cols {
        if cumulative[[last, j]] < cumulative[[last, end_col]] {
            end_col = j;
        }
    }
    let end = (last, end_col);
    let path = backtrack(&cumulative, end, true);
    Ok(AlignmentResult {
        distance: cumulative[end],
        score: path_score(d, &path),
        cumulative,
        path,
    })
}

pub fn align(d: &Array2<f64>, measure: Measure) -> Result<AlignmentResult> {
    match measure {
        Measure::Dtw => dtw(d),
        Measure::Otam => otam(d),
    }
}

/// Aligns on cost `1 - S` and reports the similarity score along the path.
pub fn align_similarity(
    sims: &Array2<f64>,
    measure: Measure,
    normalize: bool,
) -> Result<AlignmentResult> {
    let mut result = align(&sims.mapv(|s| 1.0 - s), measure)?;
    if normalize {
        result.score /= result.path.len() as f64;
    }
    Ok(result)
}

/// Cosine alignment between two embedding sequences.
pub fn alignment_score(
    anchor: &EmbeddingSequence,
    candidate: &EmbeddingSequence,
    measure: Measure,
    normalize: bool,
) -> Result<(f64, AlignmentResult)> {
    let sims = similarity_matrix(anchor, candidate)?;
    let result = align_similarity(&sims, measure, normalize)?;
    Ok((result.score, result))
}

/// Exhaustive search over every monotone path allowed by `measure`; ties go
/// to the lexicographically smallest path. Test oracle for small matrices.
pub fn brute_force_align(d: &Array2<f64>, measure: Measure) -> Result<AlignmentResult> {
    check_costs(d)?;
    let (rows, cols) = d.dim();
    if rows * cols > BRUTE_FORCE_MAX_CELLS {
        return Err(Error::InvalidArgument(format!(
            "brute force limited to {BRUTE_FORCE_MAX_CELLS} cells, got {rows}x{cols}"
        )));
    }
    let mut search = Exhaustive {
        d,
        free_end: measure == Measure::Otam,
        best: None,
        path: Vec::with_capacity(rows + cols),
    };
    let starts = match measure {
        Measure::Dtw => 0..1,
        Measure::Otam => 0..cols,
    };
    for j0 in starts {
        search.path.push((0, j0));
        search.visit(0, j0, d[[0, j0]]);
        search.path.pop();
    }
    let (distance, path) = search.best.expect("at least one path exists");
    let mut cumulative = Array2::from_elem((rows, cols), f64::NAN);
    let mut acc = 0.0;
    for &cell in &path {
        acc += d[cell];
        cumulative[cell] = acc;
    }
    Ok(AlignmentResult {
        score: path_score(d, &path),
        cumulative,
        path,
        distance,
    })
}

struct Exhaustive<'a> {
    d: &'a Array2<f64>,
    free_end: bool,
    best: Option<(f64, Vec<(usize, usize)>)>,
    path: Vec<(usize, usize)>,
}

impl Exhaustive<'_> {
    fn visit(&mut self, i: usize, j: usize, cost: f64) {
        let (rows, cols) = self.d.dim();
        let at_end = i == rows - 1 && (self.free_end || j == cols - 1);
        if at_end && self.best.as_ref().is_none_or(|(b, _)| cost < *b) {
            self.best = Some((cost, self.path.clone()));
        }
        // Successors in lexicographic order keep the first optimum found the
        // lexicographically smallest.
        for (ni, nj) in [(i, j + 1), (i + 1, j), (i + 1, j + 1)] {
            if ni < rows && nj < cols {
                self.path.push((ni, nj));
                self.visit(ni, nj, cost + self.d[[ni, nj]]);
                self.path.pop();
            }
        }
    }
}

/// Structural check: unit steps, monotone, and the boundary rule of `measure`.
pub fn is_valid_path(path: &[(usize, usize)], rows: usize, cols: usize, measure: Measure) -> bool {
    let (Some(&first), Some(&last)) = (path.first(), path.last()) else {
        return false;
    };
    let steps_ok = path.windows(2).all(|w| {
        let (di, dj) = (w[1].0.wrapping_sub(w[0].0), w[1].1.wrapping_sub(w[0].1));
        matches!((di, dj), (1, 1) | (1, 0) | (0, 1))
    });
    let in_bounds = path.iter().all(|&(i, j)| i < rows && j < cols);
    let boundary = match measure {
        Measure::Dtw => first == (0, 0) && last == (rows - 1, cols - 1),
        Measure::Otam => first.0 == 0 && last.0 == rows - 1,
    };
    steps_ok && in_bounds && boundary
}
