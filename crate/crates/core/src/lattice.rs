//! Geometry of ℤ^d: sites, unit steps, rotations, boxes, cones and projections.
//!
//! Unit steps are indexed `0..2d` with index `2i` for `+e_i` and `2i + 1` for
//! `-e_i`, so a transition vector for d = 2 reads `(+e1, -e1, +e2, -e2)`.

use std::fmt;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-9;

/// A lattice point.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site(pub SmallVec<[i64; 4]>);

impl Site {
    pub fn origin(dim: usize) -> Self {
        Site(SmallVec::from_elem(0, dim))
    }

    pub fn new(coords: &[i64]) -> Self {
        Site(SmallVec::from_slice(coords))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn coords(&self) -> &[i64] {
        &self.0
    }

    #[inline]
    pub fn dot(&self, l: &[i64]) -> i64 {
        self.0.iter().zip(l).map(|(a, b)| a * b).sum()
    }

    #[inline]
    pub fn dot_f(&self, v: &[f64]) -> f64 {
        self.0.iter().zip(v).map(|(&a, b)| a as f64 * b).sum()
    }

    pub fn l1(&self) -> i64 {
        self.0.iter().map(|c| c.abs()).sum()
    }

    pub fn l2(&self) -> f64 {
        (self.0.iter().map(|&c| (c * c) as f64).sum::<f64>()).sqrt()
    }

    pub fn sub(&self, other: &Site) -> Site {
        Site(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &Site) -> Site {
        Site(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// Neighbor in unit direction `k` (see module docs for the indexing).
    #[inline]
    pub fn step(&self, k: usize) -> Site {
        let mut s = self.clone();
        s.step_mut(k);
        s
    }

    #[inline]
    pub fn step_mut(&mut self, k: usize) {
        let axis = k / 2;
        if k % 2 == 0 {
            self.0[axis] += 1;
        } else {
            self.0[axis] -= 1;
        }
    }

    pub fn l1_dist(&self, other: &Site) -> i64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum()
    }

    pub fn neighbors(&self) -> impl Iterator<Item = Site> + '_ {
        (0..2 * self.dim()).map(move |k| self.step(k))
    }
}

impl fmt::Debug for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// The integer unit vector for step index `k` in dimension `dim`.
pub fn unit_vector(dim: usize, k: usize) -> SmallVec<[i64; 4]> {
    let mut v = SmallVec::from_elem(0, dim);
    v[k / 2] = if k % 2 == 0 { 1 } else { -1 };
    v
}

/// Step index of the unit vector `sign * e_axis`.
#[inline]
pub fn step_index(axis: usize, positive: bool) -> usize {
    2 * axis + usize::from(!positive)
}

/// `e_k · l` for step index `k`.
#[inline]
pub fn step_dot(k: usize, l: &[i64]) -> i64 {
    if k % 2 == 0 {
        l[k / 2]
    } else {
        -l[k / 2]
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn int_norm2(l: &[i64]) -> f64 {
    (l.iter().map(|&c| (c * c) as f64).sum::<f64>()).sqrt()
}

pub fn int_norm1(l: &[i64]) -> i64 {
    l.iter().map(|c| c.abs()).sum()
}

/// A rational direction: unit vector `ell` with integer representative `l = h·ell`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub ell: Vec<f64>,
    pub l_int: Vec<i64>,
    pub h: f64,
}

impl Direction {
    pub fn from_integer(l: &[i64]) -> Result<Self> {
        if l.len() < 2 {
            return Err(Error::InvalidDirection(format!(
                "dimension {} < 2",
                l.len()
            )));
        }
        if l.iter().all(|&c| c == 0) {
            return Err(Error::InvalidDirection("zero vector".into()));
        }
        let h = int_norm2(l);
        Ok(Direction {
            ell: l.iter().map(|&c| c as f64 / h).collect(),
            l_int: l.to_vec(),
            h,
        })
    }

    /// Axis direction `e_{axis}` (0-based).
    pub fn axis(dim: usize, axis: usize) -> Self {
        let mut l = vec![0; dim];
        l[axis] = 1;
        Direction::from_integer(&l).expect("axis direction is valid")
    }

    /// Snap a continuous unit vector onto a user-supplied integer vector `l`,
    /// which must point the same way within `tol` (angle cosine).
    pub fn snap(ell: &[f64], l: &[i64], tol: f64) -> Result<Self> {
        let dir = Direction::from_integer(l)?;
        let n = norm2(ell);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidDirection(format!("|ell|_2 = {n}")));
        }
        if 1.0 - dot(ell, &dir.ell) > tol {
            return Err(Error::InvalidDirection(
                "integer representative points elsewhere".into(),
            ));
        }
        Ok(dir)
    }

    pub fn dim(&self) -> usize {
        self.l_int.len()
    }

    pub fn l1(&self) -> i64 {
        int_norm1(&self.l_int)
    }
}

/// Orthogonal matrix stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    dim: usize,
    m: Vec<f64>,
}

impl Rotation {
    pub fn identity(dim: usize) -> Self {
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            m[i * dim + i] = 1.0;
        }
        Rotation { dim, m }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.m[row * self.dim + col]
    }

    /// `R v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.get(i, j) * v[j]).sum())
            .collect()
    }

    /// `R⁻¹ v = Rᵀ v`.
    pub fn apply_inverse(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.get(j, i) * v[j]).sum())
            .collect()
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, col)).collect()
    }

    /// `max |RᵀR − I|`.
    pub fn orthogonality_defect(&self) -> f64 {
        let d = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                let s: f64 = (0..d).map(|k| self.get(k, i) * self.get(k, j)).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((s - target).abs());
            }
        }
        worst
    }

    pub fn determinant(&self) -> f64 {
        // Gaussian elimination on a copy; d is tiny.
        let d = self.dim;
        let mut a = self.m.clone();
        let mut det = 1.0;
        for c in 0..d {
            let p = (c..d)
                .max_by(|&x, &y| a[x * d + c].abs().total_cmp(&a[y * d + c].abs()))
                .unwrap();
            if a[p * d + c] == 0.0 {
                return 0.0;
            }
            if p != c {
                for k in 0..d {
                    a.swap(p * d + k, c * d + k);
                }
                det = -det;
            }
            det *= a[c * d + c];
            for r in c + 1..d {
                let f = a[r * d + c] / a[c * d + c];
                for k in c..d {
                    a[r * d + k] -= f * a[c * d + k];
                }
            }
        }
        det
    }
}

/// Orthogonal `R` with `R e₁ = ell` and `det R = +1`.
///
/// Householder reflection onto `±ell` (sign chosen to avoid cancellation),
/// negated if needed, then one transverse column flipped to restore a proper
/// rotation. The first column is finally set to `ell` verbatim.
pub fn rotation_to(ell: &[f64]) -> Result<Rotation> {
    let d = ell.len();
    if d < 2 {
        return Err(Error::InvalidDirection(format!("dimension {d} < 2")));
    }
    let n = norm2(ell);
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidDirection(format!("|ell|_2 = {n}, expected 1")));
    }
    let mut e1 = vec![0.0; d];
    e1[0] = 1.0;
    if ell.iter().zip(&e1).all(|(a, b)| a == b) {
        return Ok(Rotation::identity(d));
    }
    // H = I - 2uuᵀ/|u|². With u = e1 - ell, H e1 = ell; with u = e1 + ell, H e1 = -ell.
    let flip = ell[0] > 0.0;
    let u: Vec<f64> = if flip {
        e1.iter().zip(ell).map(|(a, b)| a + b).collect()
    } else {
        e1.iter().zip(ell).map(|(a, b)| a - b).collect()
    };
    let uu: f64 = u.iter().map(|x| x * x).sum();
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let id = if i == j { 1.0 } else { 0.0 };
            let h = id - 2.0 * u[i] * u[j] / uu;
            m[i * d + j] = if flip { -h } else { h };
        }
    }
    let mut r = Rotation { dim: d, m };
    if r.determinant() < 0.0 {
        for i in 0..d {
            r.m[i * d + 1] = -r.m[i * d + 1];
        }
    }
    for i in 0..d {
        r.m[i * d] = ell[i];
    }
    Ok(r)
}

/// Box `x + R((−L,L) × (−L′,L′)^{d−1}) ∩ ℤ^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub center: Site,
    pub depth: f64,
    pub width: f64,
    pub direction: Direction,
    pub rotation: Rotation,
}

impl BoxSpec {
    pub fn new(center: Site, depth: f64, width: f64, direction: Direction) -> Result<Self> {
        if !(depth > 0.0 && width > 0.0) {
            return Err(Error::Precondition(format!(
                "box depth {depth} and width {width} must be positive"
            )));
        }
        if center.dim() != direction.dim() {
            return Err(Error::Precondition("box center/direction dimension mismatch".into()));
        }
        let rotation = rotation_to(&direction.ell)?;
        Ok(BoxSpec {
            center,
            depth,
            width,
            direction,
            rotation,
        })
    }

    fn local(&self, y: &Site) -> Vec<f64> {
        let rel: Vec<f64> = y
            .coords()
            .iter()
            .zip(self.center.coords())
            .map(|(a, b)| (a - b) as f64)
            .collect();
        self.rotation.apply_inverse(&rel)
    }

    /// Strict membership; boundary ties count as outside.
    pub fn contains(&self, y: &Site) -> bool {
        let p = self.local(y);
        p[0] > -self.depth
            && p[0] < self.depth
            && p[1..].iter().all(|&c| c > -self.width && c < self.width)
    }

    /// All lattice sites of the box, in lexicographic order.
    pub fn sites(&self) -> Vec<Site> {
        let d = self.center.dim();
        let reach = (self.depth.max(self.width) * (d as f64).sqrt()).ceil() as i64 + 1;
        let lo: Vec<i64> = self.center.coords().iter().map(|c| c - reach).collect();
        let hi: Vec<i64> = self.center.coords().iter().map(|c| c + reach).collect();
        lattice_range(&lo, &hi)
            .filter(|s| self.contains(s))
            .collect()
    }

    /// `∂⁺`: `(y − x)·ell ≥ L`.
    pub fn on_positive_side(&self, y: &Site) -> bool {
        let rel = y.sub(&self.center);
        rel.dot_f(&self.direction.ell) >= self.depth
    }
}

/// Does the exit site lie on `∂⁺B`? Requires `exit_site` to be outside the
/// box and one unit step from an interior site.
pub fn box_positive_boundary_hit(b: &BoxSpec, exit_site: &Site) -> Result<bool> {
    if b.contains(exit_site) {
        return Err(Error::Precondition(format!(
            "exit site {exit_site} lies inside the box"
        )));
    }
    if !exit_site.neighbors().any(|n| b.contains(&n)) {
        return Err(Error::Precondition(format!(
            "exit site {exit_site} is not adjacent to the box"
        )));
    }
    Ok(b.on_positive_side(exit_site))
}

/// Cone `C(x, l, ζ) = { y : (y − x)·l ≥ ζ |l|₂ |y − x|₂ }`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeSpec {
    pub apex: Site,
    pub l: Vec<i64>,
    pub zeta: f64,
}

impl ConeSpec {
    pub fn new(apex: Site, l: Vec<i64>, zeta: f64) -> Result<Self> {
        if !(zeta > 0.0 && zeta < 1.0) {
            return Err(Error::spec("zeta", format!("{zeta} not in (0,1)")));
        }
        if l.iter().all(|&c| c == 0) || l.len() != apex.dim() {
            return Err(Error::InvalidDirection(format!("{l:?}")));
        }
        Ok(ConeSpec { apex, l, zeta })
    }

    pub fn contains(&self, y: &Site) -> bool {
        cone_contains_rel(&self.l, self.zeta, &y.sub(&self.apex).0)
    }
}

/// Cone test on a displacement `rel = y − apex`.
#[inline]
pub fn cone_contains_rel(l: &[i64], zeta: f64, rel: &[i64]) -> bool {
    let lhs: i64 = rel.iter().zip(l).map(|(a, b)| a * b).sum();
    if lhs < 0 {
        return false;
    }
    let rel2: i64 = rel.iter().map(|c| c * c).sum();
    let l2: i64 = l.iter().map(|c| c * c).sum();
    let lhs = lhs as f64;
    lhs * lhs >= zeta * zeta * (l2 as f64) * (rel2 as f64)
}

pub fn cone_contains(cone: &ConeSpec, y: &Site) -> bool {
    cone.contains(y)
}

/// Default cone opening for aspect ratio `aspect`:
/// `0.9 · min{1/(9d), 1/(3d·aspect), cos(π/2 − arctan(3·aspect))}`.
pub fn default_zeta(dim: usize, aspect: f64) -> f64 {
    let d = dim as f64;
    let c = (std::f64::consts::FRAC_PI_2 - (3.0 * aspect).atan()).cos();
    0.9 * (1.0 / (9.0 * d)).min(1.0 / (3.0 * d * aspect)).min(c)
}

/// `Π(z) = z − (z·v̂) v̂`.
pub fn project_orthogonal(z: &[f64], v_hat: &[f64]) -> Vec<f64> {
    debug_assert!((norm2(v_hat) - 1.0).abs() < UNIT_TOL);
    let c = dot(z, v_hat);
    z.iter().zip(v_hat).map(|(a, b)| a - c * b).collect()
}

/// Lexicographic iteration over the integer hyper-rectangle `[lo, hi]`.
pub fn lattice_range(lo: &[i64], hi: &[i64]) -> impl Iterator<Item = Site> {
    let lo = lo.to_vec();
    let hi = hi.to_vec();
    let empty = lo.iter().zip(&hi).any(|(a, b)| a > b);
    let mut cur = if empty { None } else { Some(lo.clone()) };
    std::iter::from_fn(move || {
        let out = cur.clone()?;
        let mut next = out.clone();
        let mut i = next.len();
        loop {
            if i == 0 {
                cur = None;
                break;
            }
            i -= 1;
            if next[i] < hi[i] {
                next[i] += 1;
                cur = Some(next);
                break;
            }
            next[i] = lo[i];
        }
        Some(Site::new(&out))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(c: &[i64]) -> Site {
        Site::new(c)
    }

    #[test]
    fn rotation_identity_for_e1() {
        let r = rotation_to(&[1.0, 0.0]).unwrap();
        assert_eq!(r, Rotation::identity(2));
    }

    #[test]
    fn rotation_to_e2() {
        let r = rotation_to(&[0.0, 1.0]).unwrap();
        assert!(r.orthogonality_defect() < 1e-12);
        let c = r.column(0);
        assert!((c[0]).abs() < 1e-12 && (c[1] - 1.0).abs() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_to_diagonal() {
        let h = 1.0 / 2f64.sqrt();
        let r = rotation_to(&[h, h]).unwrap();
        let e = r.apply(&[1.0, 0.0]);
        assert!((e[0] - h).abs() < 1e-12 && (e[1] - h).abs() < 1e-12);
        assert!(r.orthogonality_defect() < 1e-12);
    }

    #[test]
    fn rotation_rejects_non_unit() {
        assert!(matches!(
            rotation_to(&[1.0, 1.0]),
            Err(Error::InvalidDirection(_))
        ));
    }

    #[test]
    fn positive_boundary_examples() {
        let b = BoxSpec::new(Site::origin(2), 5.0, 10.0, Direction::axis(2, 0)).unwrap();
        assert!(box_positive_boundary_hit(&b, &s(&[5, 0])).unwrap());
        assert!(!box_positive_boundary_hit(&b, &s(&[-5, 0])).unwrap());
        assert!(!box_positive_boundary_hit(&b, &s(&[3, 10])).unwrap());
        assert!(matches!(
            box_positive_boundary_hit(&b, &s(&[0, 0])),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn box_sites_count() {
        let b = BoxSpec::new(Site::origin(2), 5.0, 10.0, Direction::axis(2, 0)).unwrap();
        assert_eq!(b.sites().len(), 9 * 19);
    }

    #[test]
    fn cone_examples() {
        let c = ConeSpec::new(Site::origin(2), vec![1, 0], 0.05).unwrap();
        assert!(c.contains(&s(&[10, 1])));
        assert!(!c.contains(&s(&[0, 5])));
        assert!(c.contains(&s(&[0, 0])));
        let c2 = ConeSpec::new(s(&[3, -2]), vec![-1, 2], 0.3).unwrap();
        assert!(c2.contains(&s(&[3, -2])));
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_orthogonal(&[3.0, 4.0], &[1.0, 0.0]), vec![0.0, 4.0]);
        let h = 1.0 / 2f64.sqrt();
        let p = project_orthogonal(&[h, h], &[h, h]);
        assert!(norm2(&p) < 1e-12);
        let p = project_orthogonal(&[1.0, 1.0], &[h, h]);
        assert!(norm2(&p) < 1e-12);
    }

    #[test]
    fn default_zeta_aspect_three() {
        let z = default_zeta(2, 3.0);
        assert!((z - 0.05).abs() < 1e-12);
    }

    #[test]
    fn direction_invariants() {
        let d = Direction::from_integer(&[2, -1, 2]).unwrap();
        assert!((norm2(&d.ell) - 1.0).abs() < 1e-12);
        for (li, e) in d.l_int.iter().zip(&d.ell) {
            assert!((*li as f64 - d.h * e).abs() < 1e-12);
        }
        assert!(Direction::from_integer(&[0, 0]).is_err());
    }

    #[test]
    fn lattice_range_lexicographic() {
        let v: Vec<Site> = lattice_range(&[0, 0], &[1, 2]).collect();
        assert_eq!(v.len(), 6);
        assert_eq!(v[0], s(&[0, 0]));
        assert_eq!(v[1], s(&[0, 1]));
        assert_eq!(v[5], s(&[1, 2]));
    }

    fn unit_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, 2..5).prop_filter_map("nonzero", |v| {
            let n = norm2(&v);
            (n > 1e-3).then(|| v.iter().map(|x| x / n).collect())
        })
    }

    proptest! {
        #[test]
        fn rotation_is_orthogonal_and_hits_ell(ell in unit_vec()) {
            let r = rotation_to(&ell).unwrap();
            prop_assert!(r.orthogonality_defect() < 1e-12);
            let mut e1 = vec![0.0; ell.len()];
            e1[0] = 1.0;
            let re1 = r.apply(&e1);
            let err: Vec<f64> = re1.iter().zip(&ell).map(|(a, b)| a - b).collect();
            prop_assert!(norm2(&err) < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn projection_idempotent(z in prop::collection::vec(-50.0f64..50.0, 3), v in unit_vec()) {
            prop_assume!(v.len() == 3);
            let p = project_orthogonal(&z, &v);
            prop_assert!(dot(&p, &v).abs() < 1e-12 * (1.0 + norm2(&z)));
            let pp = project_orthogonal(&p, &v);
            for (a, b) in p.iter().zip(&pp) {
                prop_assert!((a - b).abs() < 1e-12 * (1.0 + norm2(&z)));
            }
        }

        #[test]
        fn cone_monotone_along_l(
            l in prop::collection::vec(-3i64..=3, 2),
            y in prop::collection::vec(-20i64..=20, 2),
            t in 0i64..20,
            zeta in 0.01f64..0.9,
        ) {
            prop_assume!(l.iter().any(|&c| c != 0));
            let c = ConeSpec::new(Site::origin(2), l.clone(), zeta).unwrap();
            let ys = Site::new(&y);
            if c.contains(&ys) {
                let shifted = Site::new(&[y[0] + t * l[0], y[1] + t * l[1]]);
                prop_assert!(c.contains(&shifted));
            }
        }

        #[test]
        fn box_membership_shift_invariant(
            c in prop::collection::vec(-30i64..30, 2),
            y in prop::collection::vec(-30i64..30, 2),
            shift in prop::collection::vec(-100i64..100, 2),
            l in prop::collection::vec(-3i64..=3, 2),
        ) {
            prop_assume!(l.iter().any(|&v| v != 0));
            let dir = Direction::from_integer(&l).unwrap();
            let b1 = BoxSpec::new(Site::new(&c), 7.0, 11.0, dir.clone()).unwrap();
            let b2 = BoxSpec::new(
                Site::new(&[c[0] + shift[0], c[1] + shift[1]]), 7.0, 11.0, dir).unwrap();
            let y2 = Site::new(&[y[0] + shift[0], y[1] + shift[1]]);
            prop_assert_eq!(b1.contains(&Site::new(&y)), b2.contains(&y2));
        }
    }
}
