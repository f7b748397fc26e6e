//! Kernel shape masks and receptive-field footprints.
//!
//! A mask is a set of active `(dy, dx)` offsets inside a `size × size`
//! window centred on the origin. Offsets are stored in row-major order so
//! they double as the packing order of a masked convolution's weights.
//!
//! Quasi-hexagonal (QH) masks keep the centre, the four edge neighbours and
//! two corners on one side of the window. Pattern `U` keeps the two top
//! corners; `R`, `D` and `L` are its successive clockwise quarter turns, so
//! the kept corners face right, down and left respectively.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

pub type Offset = (i32, i32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ShapeKind {
    Square,
    Qh,
    /// Fragmented kernel: a square window with two seeded non-centre cells removed.
    Fk,
    /// A corner and one edge cell adjacent to it removed.
    Ub,
    /// Two diagonally opposite corners removed.
    Dia,
}

impl ShapeKind {
    pub fn needs_pattern(self) -> bool {
        matches!(self, ShapeKind::Qh | ShapeKind::Ub | ShapeKind::Dia)
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Square => "SQUARE",
            ShapeKind::Qh => "QH",
            ShapeKind::Fk => "FK",
            ShapeKind::Ub => "UB",
            ShapeKind::Dia => "DIA",
        })
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SQUARE" | "SQ" => Ok(ShapeKind::Square),
            "QH" => Ok(ShapeKind::Qh),
            "FK" => Ok(ShapeKind::Fk),
            "UB" => Ok(ShapeKind::Ub),
            "DIA" => Ok(ShapeKind::Dia),
            other => invalid(format!("unknown kernel shape {other:?}")),
        }
    }
}

/// Orientation tag of a directional mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Orientation {
    U,
    R,
    D,
    L,
}

impl Orientation {
    pub const ALL: [Orientation; 4] = [Orientation::U, Orientation::R, Orientation::D, Orientation::L];

    /// Number of clockwise quarter turns from `U`.
    pub fn quarter_turns(self) -> usize {
        match self {
            Orientation::U => 0,
            Orientation::R => 1,
            Orientation::D => 2,
            Orientation::L => 3,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Orientation::U => 'U',
            Orientation::R => 'R',
            Orientation::D => 'D',
            Orientation::L => 'L',
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "U" => Ok(Orientation::U),
            "R" => Ok(Orientation::R),
            "D" => Ok(Orientation::D),
            "L" => Ok(Orientation::L),
            other => invalid(format!("unknown orientation {other:?}")),
        }
    }
}

/// The arguments a mask is generated from. This is also the serialized form
/// of a [`KernelMask`]; the cell set is always recomputed on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub kind: ShapeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<Orientation>,
    pub size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MaskSpec", into = "MaskSpec")]
pub struct KernelMask {
    size: usize,
    cells: Vec<Offset>,
    kind: ShapeKind,
    pattern: Option<Orientation>,
    seed: Option<u64>,
}

impl TryFrom<MaskSpec> for KernelMask {
    type Error = Error;

    fn try_from(s: MaskSpec) -> Result<Self> {
        make_mask(s.kind, s.pattern, s.size, s.seed)
    }
}

impl From<KernelMask> for MaskSpec {
    fn from(m: KernelMask) -> Self {
        m.spec()
    }
}

/// Build a kernel mask.
///
/// `pattern` is required exactly for QH, UB and DIA; `seed` exactly for FK.
/// The directional kinds are only defined on a 3×3 window.
pub fn make_mask(
    kind: ShapeKind,
    pattern: Option<Orientation>,
    size: usize,
    seed: Option<u64>,
) -> Result<KernelMask> {
    if size < 3 || size % 2 == 0 {
        return invalid(format!("kernel size must be odd and at least 3, got {size}"));
    }
    if kind.needs_pattern() != pattern.is_some() {
        return invalid(if kind.needs_pattern() {
            format!("{kind} mask requires an orientation pattern")
        } else {
            format!("{kind} mask does not take an orientation pattern")
        });
    }
    if (kind == ShapeKind::Fk) != seed.is_some() {
        return invalid(if kind == ShapeKind::Fk {
            "FK mask requires a seed".to_string()
        } else {
            format!("{kind} mask does not take a seed")
        });
    }
    if kind.needs_pattern() && size != 3 {
        return invalid(format!("{kind} masks are only defined for size 3, got {size}"));
    }

    let r = (size / 2) as i32;
    let square: Vec<Offset> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect();

    let removed: Vec<Offset> = match kind {
        ShapeKind::Square => Vec::new(),
        // U keeps the top corners, so the bottom pair goes.
        ShapeKind::Qh => vec![(1, -1), (1, 1)],
        ShapeKind::Ub => vec![(1, -1), (1, 0)],
        ShapeKind::Dia => vec![(1, -1), (-1, 1)],
        ShapeKind::Fk => {
            let candidates: Vec<Offset> = square.iter().copied().filter(|&c| c != (0, 0)).collect();
            let mut g = rng::seeded(seed.unwrap_or_default());
            index::sample(&mut g, candidates.len(), 2)
                .into_iter()
                .map(|i| candidates[i])
                .collect()
        }
    };
    let turns = pattern.map_or(0, Orientation::quarter_turns);
    let removed: BTreeSet<Offset> = removed.into_iter().map(|c| rotate_offset(c, turns)).collect();

    let cells = square.into_iter().filter(|c| !removed.contains(c)).collect();
    Ok(KernelMask { size, cells, kind, pattern, seed })
}

/// Clockwise quarter turn applied `turns` times: `(dy, dx) -> (dx, -dy)`.
pub fn rotate_offset((dy, dx): Offset, turns: usize) -> Offset {
    (0..turns % 4).fold((dy, dx), |(y, x), _| (x, -y))
}

impl KernelMask {
    pub fn full_square(size: usize) -> Result<Self> {
        make_mask(ShapeKind::Square, None, size, None)
    }

    pub fn qh(pattern: Orientation) -> Self {
        make_mask(ShapeKind::Qh, Some(pattern), 3, None).expect("QH 3x3 mask is always valid")
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> i32 {
        (self.size / 2) as i32
    }

    pub fn kind(&self) -> ShapeKind {
        self.kind
    }

    pub fn pattern(&self) -> Option<Orientation> {
        self.pattern
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Active offsets in row-major order.
    pub fn cells(&self) -> &[Offset] {
        &self.cells
    }

    pub fn contains(&self, cell: Offset) -> bool {
        self.cells.binary_search_by(|c| c.cmp(&cell)).is_ok()
    }

    /// Indices of the active cells in row-major `size × size` kernel storage.
    pub fn flat_indices(&self) -> Vec<usize> {
        let r = self.radius();
        self.cells
            .iter()
            .map(|&(dy, dx)| ((dy + r) as usize) * self.size + (dx + r) as usize)
            .collect()
    }

    /// Cell set rotated clockwise by quarter turns. The result keeps the
    /// geometry only; its kind is reported as `SQUARE` only if it is full.
    pub fn rotated_cells(&self, turns: usize) -> Vec<Offset> {
        let mut v: Vec<Offset> = self.cells.iter().map(|&c| rotate_offset(c, turns)).collect();
        v.sort_unstable();
        v
    }

    pub fn spec(&self) -> MaskSpec {
        MaskSpec { kind: self.kind, pattern: self.pattern, size: self.size, seed: self.seed }
    }

    /// One line per row, `#` for active and `.` for inactive cells.
    pub fn to_text(&self) -> String {
        let r = self.radius();
        let mut s = String::with_capacity(self.size * (self.size + 1));
        for dy in -r..=r {
            for dx in -r..=r {
                s.push(if self.contains((dy, dx)) { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }

    /// Short label such as `QH-U`, `FK#7` or `SQUARE3`.
    pub fn label(&self) -> String {
        match (self.kind, self.pattern, self.seed) {
            (k, Some(p), _) => format!("{k}-{p}"),
            (ShapeKind::Fk, _, Some(s)) => format!("FK#{s}"),
            (k, _, _) => format!("{k}{}", self.size),
        }
    }
}

/// Number of trainable weights a single kernel with this mask carries.
pub fn mask_weight_count(mask: &KernelMask) -> usize {
    mask.cells.len()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSequence {
    pub depth: usize,
    pub patterns: Vec<Orientation>,
    pub seed: u64,
}

impl PatternSequence {
    pub fn masks(&self) -> Vec<KernelMask> {
        self.patterns.iter().map(|&p| KernelMask::qh(p)).collect()
    }

    pub fn to_string_compact(&self) -> String {
        self.patterns.iter().map(|p| p.as_char()).collect()
    }
}

/// Draw `depth` orientations independently and uniformly from `{U, R, D, L}`
/// with a ChaCha8 generator seeded by `seed`.
pub fn sample_pattern_sequence(depth: usize, seed: u64) -> Result<PatternSequence> {
    if depth < 1 {
        return invalid("pattern sequence depth must be at least 1");
    }
    let mut g = rng::seeded(seed);
    let patterns = (0..depth).map(|_| Orientation::ALL[g.gen_range(0..4)]).collect();
    Ok(PatternSequence { depth, patterns, seed })
}

/// Binary receptive-field footprint on a square grid centred at the origin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Footprint {
    extent: usize,
    covered: Vec<bool>,
}

impl Footprint {
    pub fn extent(&self) -> usize {
        self.extent
    }

    pub fn radius(&self) -> i32 {
        (self.extent / 2) as i32
    }

    /// Row-major coverage flags.
    pub fn covered(&self) -> &[bool] {
        &self.covered
    }

    pub fn get(&self, dy: i32, dx: i32) -> bool {
        let r = self.radius();
        if dy.abs() > r || dx.abs() > r {
            return false;
        }
        self.covered[((dy + r) as usize) * self.extent + (dx + r) as usize]
    }

    pub fn count(&self) -> usize {
        self.covered.iter().filter(|&&c| c).count()
    }

    pub fn offsets(&self) -> Vec<Offset> {
        let r = self.radius();
        (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|&(dy, dx)| self.get(dy, dx))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in self.covered.chunks(self.extent) {
            s.extend(row.iter().map(|&c| if c { '#' } else { '.' }));
            s.push('\n');
        }
        s
    }
}

/// Compose the receptive field of a stack of stride-1 masks as the iterated
/// Minkowski sum of their cell sets.
pub fn compose_rf(masks: &[KernelMask]) -> Result<Footprint> {
    let first = masks.first().ok_or_else(|| Error::InvalidArgument("compose_rf needs at least one mask".into()))?;
    if let Some(m) = masks.iter().find(|m| m.size != first.size) {
        return Err(Error::ShapeMismatch(format!(
            "mask sizes differ: {} vs {}",
            first.size, m.size
        )));
    }
    let radius: i32 = masks.iter().map(KernelMask::radius).sum();
    let extent = (2 * radius + 1) as usize;

    // Dilate on the final grid; every intermediate footprint fits inside it.
    let mut covered = vec![false; extent * extent];
    covered[(radius as usize) * extent + radius as usize] = true;
    let mut next = vec![false; extent * extent];
    for mask in masks {
        next.iter_mut().for_each(|c| *c = false);
        for y in 0..extent as i32 {
            for x in 0..extent as i32 {
                if !covered[(y as usize) * extent + x as usize] {
                    continue;
                }
                for &(dy, dx) in &mask.cells {
                    let (ny, nx) = (y + dy, x + dx);
                    next[(ny as usize) * extent + nx as usize] = true;
                }
            }
        }
        std::mem::swap(&mut covered, &mut next);
    }
    Ok(Footprint { extent, covered })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qh_all() -> Vec<KernelMask> {
        Orientation::ALL.iter().map(|&p| KernelMask::qh(p)).collect()
    }

    #[test]
    fn square_has_every_cell() {
        assert_eq!(mask_weight_count(&KernelMask::full_square(3).unwrap()), 9);
        assert_eq!(mask_weight_count(&KernelMask::full_square(5).unwrap()), 25);
    }

    #[test]
    fn qh_text_art() {
        assert_eq!(KernelMask::qh(Orientation::U).to_text(), "###\n###\n.#.\n");
        assert_eq!(KernelMask::qh(Orientation::R).to_text(), ".##\n###\n.##\n");
        assert_eq!(KernelMask::qh(Orientation::D).to_text(), ".#.\n###\n###\n");
        assert_eq!(KernelMask::qh(Orientation::L).to_text(), "##.\n###\n##.\n");
    }

    #[test]
    fn qh_invariants() {
        for m in qh_all() {
            assert_eq!(mask_weight_count(&m), 7);
            for c in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
                assert!(m.contains(c), "{} missing {c:?}", m.label());
            }
            let corners = [(-1, -1), (-1, 1), (1, -1), (1, 1)].iter().filter(|&&c| m.contains(c)).count();
            assert_eq!(corners, 2);
        }
    }

    #[test]
    fn qh_orientations_are_rotations_of_u() {
        let u = KernelMask::qh(Orientation::U);
        for p in Orientation::ALL {
            assert_eq!(KernelMask::qh(p).cells(), u.rotated_cells(p.quarter_turns()).as_slice());
        }
        for m in qh_all() {
            assert_eq!(m.rotated_cells(4), m.cells());
        }
    }

    #[test]
    fn reference_shapes() {
        for p in Orientation::ALL {
            let ub = make_mask(ShapeKind::Ub, Some(p), 3, None).unwrap();
            assert_eq!(ub.cells().len(), 7);
            let missing: Vec<Offset> = KernelMask::full_square(3)
                .unwrap()
                .cells()
                .iter()
                .copied()
                .filter(|&c| !ub.contains(c))
                .collect();
            let corner = missing.iter().filter(|(y, x)| y.abs() == 1 && x.abs() == 1).count();
            assert_eq!(corner, 1);
            let (a, b) = (missing[0], missing[1]);
            assert_eq!((a.0 - b.0).abs() + (a.1 - b.1).abs(), 1, "UB removals must be adjacent");

            let dia = make_mask(ShapeKind::Dia, Some(p), 3, None).unwrap();
            assert_eq!(dia.cells().len(), 7);
            let gone: Vec<Offset> = [(-1, -1), (-1, 1), (1, -1), (1, 1)]
                .into_iter()
                .filter(|&c| !dia.contains(c))
                .collect();
            assert_eq!(gone.len(), 2);
            assert_eq!((gone[0].0 + gone[1].0, gone[0].1 + gone[1].1), (0, 0));
        }
    }

    #[test]
    fn fk_is_seeded_and_keeps_centre() {
        let a = make_mask(ShapeKind::Fk, None, 3, Some(7)).unwrap();
        let b = make_mask(ShapeKind::Fk, None, 3, Some(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cells().len(), 7);
        assert!(a.contains((0, 0)));
        let distinct: BTreeSet<Vec<Offset>> = (0..200u64)
            .map(|s| make_mask(ShapeKind::Fk, None, 3, Some(s)).unwrap().cells().to_vec())
            .collect();
        // 28 possible pairs of non-centre cells
        assert!(distinct.len() > 20 && distinct.len() <= 28);
    }

    #[test]
    fn make_mask_rejects_bad_arguments() {
        assert!(make_mask(ShapeKind::Square, None, 4, None).is_err());
        assert!(make_mask(ShapeKind::Square, None, 1, None).is_err());
        assert!(make_mask(ShapeKind::Qh, None, 3, None).is_err());
        assert!(make_mask(ShapeKind::Fk, None, 3, None).is_err());
        assert!(make_mask(ShapeKind::Qh, Some(Orientation::U), 5, None).is_err());
        assert!(make_mask(ShapeKind::Square, Some(Orientation::U), 3, None).is_err());
    }

    #[test]
    fn flat_indices_follow_row_major_storage() {
        assert_eq!(KernelMask::qh(Orientation::U).flat_indices(), vec![0, 1, 2, 3, 4, 5, 7]);
        assert_eq!(KernelMask::full_square(3).unwrap().flat_indices(), (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn pattern_sequence_contract() {
        assert!(sample_pattern_sequence(0, 1).is_err());
        let a = sample_pattern_sequence(4, 99).unwrap();
        assert_eq!(a, sample_pattern_sequence(4, 99).unwrap());
        assert_eq!(a.patterns.len(), 4);
        assert_eq!(sample_pattern_sequence(1, 5).unwrap().patterns.len(), 1);
    }

    #[test]
    fn pattern_frequencies_are_uniform() {
        let n = 100_000usize;
        let seq = sample_pattern_sequence(n, 2024).unwrap();
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for p in Orientation::ALL {
            let k = seq.patterns.iter().filter(|&&q| q == p).count() as f64;
            assert!((k - n as f64 * 0.25).abs() < 4.0 * sigma, "{p}: {k}");
        }
    }

    #[test]
    fn compose_rf_of_squares_is_full() {
        for depth in 1..=6 {
            let masks = vec![KernelMask::full_square(3).unwrap(); depth];
            let fp = compose_rf(&masks).unwrap();
            assert_eq!(fp.extent(), 2 * depth + 1);
            assert_eq!(fp.count(), fp.extent() * fp.extent());
        }
    }

    #[test]
    fn compose_rf_depth_one_is_the_mask() {
        for m in qh_all() {
            let fp = compose_rf(std::slice::from_ref(&m)).unwrap();
            assert_eq!(fp.to_text(), m.to_text());
        }
    }

    #[test]
    fn compose_rf_errors() {
        assert!(compose_rf(&[]).is_err());
        let mixed = [KernelMask::full_square(3).unwrap(), KernelMask::full_square(5).unwrap()];
        assert!(matches!(compose_rf(&mixed), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn serde_roundtrip_recomputes_cells() {
        let m = make_mask(ShapeKind::Fk, None, 3, Some(11)).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: KernelMask = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
        assert!(serde_json::from_str::<KernelMask>(r#"{"kind":"QH","size":3}"#).is_err());
    }
}
