//! Box geometry on `Z^d`.
//!
//! Two norms live side by side here. Connectivity of site sets is measured
//! with cube (ℓ∞) adjacency, so `y` is an `r`-neighbor of `x` when
//! `y ∈ B_r(x)`. Distances between sets use the lattice (ℓ¹) norm.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point of `Z^d`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site(Vec<i64>);

impl Site {
    pub fn new(coords: impl Into<Vec<i64>>) -> Self {
        let coords = coords.into();
        assert!(!coords.is_empty(), "sites need dimension >= 1");
        Site(coords)
    }

    /// The origin of `Z^d`.
    pub fn origin(dim: usize) -> Self {
        Site::new(vec![0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }

    /// Lattice norm `Σ |x_i|`.
    pub fn ell1_norm(&self) -> u64 {
        self.0.iter().map(|c| c.unsigned_abs()).sum()
    }

    pub fn sup_norm(&self) -> u64 {
        self.0.iter().map(|c| c.unsigned_abs()).max().unwrap_or(0)
    }

    pub fn ell1_distance(&self, other: &Site) -> u64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0.iter().zip(&other.0).map(|(a, b)| a.abs_diff(*b)).sum()
    }

    pub fn sup_distance(&self, other: &Site) -> u64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0.iter().zip(&other.0).map(|(a, b)| a.abs_diff(*b)).max().unwrap_or(0)
    }

    pub fn offset(&self, delta: &Site) -> Site {
        Site(self.0.iter().zip(&delta.0).map(|(a, b)| a + b).collect())
    }

    pub fn minus(&self, other: &Site) -> Site {
        Site(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// The `2d` nearest neighbors, in a fixed order.
    pub fn neighbors(&self) -> impl Iterator<Item = Site> + '_ {
        (0..self.dim()).flat_map(move |i| {
            [-1i64, 1].into_iter().map(move |s| {
                let mut c = self.0.clone();
                c[i] += s;
                Site(c)
            })
        })
    }
}

impl fmt::Debug for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Site {
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

impl From<i64> for Site {
    fn from(x: i64) -> Self {
        Site(vec![x])
    }
}

impl<const D: usize> From<[i64; D]> for Site {
    fn from(c: [i64; D]) -> Self {
        Site::new(c.to_vec())
    }
}

/// Lattice norm of a site.
pub fn ell1_norm(x: &Site) -> u64 {
    x.ell1_norm()
}

/// The cube `B_R(y) = y + [-R, R]^d ∩ Z^d`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxDomain {
    pub center: Site,
    pub radius: u64,
}

impl BoxDomain {
    pub fn new(center: Site, radius: u64) -> Self {
        BoxDomain { center, radius }
    }

    /// `B_R` centered at the origin.
    pub fn centered(dim: usize, radius: u64) -> Self {
        BoxDomain::new(Site::origin(dim), radius)
    }

    pub fn dim(&self) -> usize {
        self.center.dim()
    }

    pub fn side(&self) -> u64 {
        2 * self.radius + 1
    }

    /// `(2R+1)^d`.
    pub fn len(&self) -> usize {
        (self.side() as usize).pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, x: &Site) -> bool {
        x.dim() == self.dim() && x.sup_distance(&self.center) <= self.radius
    }

    pub fn contains_box(&self, other: &BoxDomain) -> bool {
        other.dim() == self.dim()
            && other.center.sup_distance(&self.center) + other.radius <= self.radius
    }

    /// Row-major index with the first coordinate most significant, so index
    /// order coincides with lexicographic site order.
    pub fn index_of(&self, x: &Site) -> Option<usize> {
        if !self.contains(x) {
            return None;
        }
        let side = self.side() as usize;
        let r = self.radius as i64;
        let mut idx = 0usize;
        for (c, o) in x.coords().iter().zip(self.center.coords()) {
            idx = idx * side + (c - o + r) as usize;
        }
        Some(idx)
    }

    pub fn site_at(&self, mut idx: usize) -> Site {
        let side = self.side() as usize;
        let d = self.dim();
        let r = self.radius as i64;
        let mut coords = vec![0i64; d];
        for i in (0..d).rev() {
            coords[i] = (idx % side) as i64 - r + self.center.coords()[i];
            idx /= side;
        }
        Site(coords)
    }

    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        (0..self.len()).map(move |i| self.site_at(i))
    }

    pub fn to_site_set(&self) -> SiteSet {
        SiteSet(self.sites().collect())
    }

    /// Intersection with another box; `None` if disjoint.
    pub fn intersect(&self, other: &BoxDomain) -> Option<SiteSet> {
        let d = self.dim();
        let mut lo = Vec::with_capacity(d);
        let mut hi = Vec::with_capacity(d);
        for i in 0..d {
            let a = self.center.coords()[i];
            let b = other.center.coords()[i];
            let l = (a - self.radius as i64).max(b - other.radius as i64);
            let h = (a + self.radius as i64).min(b + other.radius as i64);
            if l > h {
                return None;
            }
            lo.push(l);
            hi.push(h);
        }
        Some(SiteSet(cartesian(&lo, &hi).collect()))
    }
}

fn cartesian(lo: &[i64], hi: &[i64]) -> impl Iterator<Item = Site> {
    let lo = lo.to_vec();
    let hi = hi.to_vec();
    let d = lo.len();
    let mut cur = lo.clone();
    let mut done = false;
    std::iter::from_fn(move || {
        if done {
            return None;
        }
        let out = Site(cur.clone());
        let mut i = d;
        loop {
            if i == 0 {
                done = true;
                break;
            }
            i -= 1;
            if cur[i] < hi[i] {
                cur[i] += 1;
                break;
            }
            cur[i] = lo[i];
        }
        Some(out)
    })
}

/// A finite set of sites in canonical (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SiteSet(BTreeSet<Site>);

impl SiteSet {
    pub fn new() -> Self {
        SiteSet(BTreeSet::new())
    }

    pub fn singleton(x: Site) -> Self {
        let mut s = SiteSet::new();
        s.insert(x);
        s
    }

    pub fn insert(&mut self, x: Site) -> bool {
        if let Some(first) = self.0.first() {
            assert_eq!(first.dim(), x.dim(), "mixed dimensions in a site set");
        }
        self.0.insert(x)
    }

    pub fn remove(&mut self, x: &Site) -> bool {
        self.0.remove(x)
    }

    pub fn contains(&self, x: &Site) -> bool {
        self.0.contains(x)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Site> {
        self.0.iter()
    }

    pub fn first(&self) -> Option<&Site> {
        self.0.first()
    }

    pub fn dim(&self) -> Option<usize> {
        self.0.first().map(Site::dim)
    }

    pub fn union(&self, other: &SiteSet) -> SiteSet {
        SiteSet(self.0.union(&other.0).cloned().collect())
    }

    pub fn difference(&self, other: &SiteSet) -> SiteSet {
        SiteSet(self.0.difference(&other.0).cloned().collect())
    }

    pub fn is_subset(&self, other: &SiteSet) -> bool {
        self.0.is_subset(&other.0)
    }

    pub fn is_disjoint(&self, other: &SiteSet) -> bool {
        self.0.is_disjoint(&other.0)
    }

    /// Keeps only the sites inside `b`.
    pub fn restrict_to(&self, b: &BoxDomain) -> SiteSet {
        SiteSet(self.0.iter().filter(|x| b.contains(x)).cloned().collect())
    }
}

impl FromIterator<Site> for SiteSet {
    fn from_iter<I: IntoIterator<Item = Site>>(iter: I) -> Self {
        let mut s = SiteSet::new();
        for x in iter {
            s.insert(x);
        }
        s
    }
}

impl IntoIterator for SiteSet {
    type Item = Site;
    type IntoIter = std::collections::btree_set::IntoIter<Site>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.into_iter()
    }
}

impl<'a> IntoIterator for &'a SiteSet {
    type Item = &'a Site;
    type IntoIter = std::collections::btree_set::Iter<'a, Site>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

impl From<&BoxDomain> for SiteSet {
    fn from(b: &BoxDomain) -> Self {
        b.to_site_set()
    }
}

/// The `R`-cube neighborhood `B_R(A) = ∪_{y∈A} B_R(y)`; `B_0(A) = A`.
pub fn cube_neighborhood(a: &SiteSet, radius: u64) -> SiteSet {
    if radius == 0 {
        return a.clone();
    }
    let mut out = SiteSet::new();
    for y in a {
        for x in BoxDomain::new(y.clone(), radius).sites() {
            out.insert(x);
        }
    }
    out
}

/// Maximal `r`-connected components of `a` under cube adjacency
/// (`y ∈ B_r(x)`), each sorted, listed by smallest member.
pub fn connected_components(a: &SiteSet, r: u64) -> Vec<SiteSet> {
    assert!(r >= 1, "connectivity radius must be positive");
    let sites: Vec<&Site> = a.iter().collect();
    let n = sites.len();
    if n == 0 {
        return Vec::new();
    }
    let d = sites[0].dim();
    // Bucket sites into cells of side r so that r-neighbors lie in adjacent cells.
    let cell_of = |x: &Site| -> Vec<i64> {
        x.coords().iter().map(|c| c.div_euclid(r as i64)).collect()
    };
    let mut cells: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    for (i, x) in sites.iter().enumerate() {
        cells.entry(cell_of(x)).or_default().push(i);
    }
    let offsets: Vec<Vec<i64>> = BoxDomain::centered(d, 1)
        .sites()
        .map(|s| s.coords().to_vec())
        .collect();

    let mut label = vec![usize::MAX; n];
    let mut out = Vec::new();
    // Sites are visited in lexicographic order, so component order follows
    // the smallest member automatically.
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let comp_id = out.len();
        label[start] = comp_id;
        let mut members = SiteSet::new();
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            members.insert(sites[i].clone());
            let c = cell_of(sites[i]);
            for off in &offsets {
                let key: Vec<i64> = c.iter().zip(off).map(|(a, b)| a + b).collect();
                if let Some(bucket) = cells.get(&key) {
                    for &j in bucket {
                        if label[j] == usize::MAX && sites[i].sup_distance(sites[j]) <= r {
                            label[j] = comp_id;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        out.push(members);
    }
    out
}

/// Minimal lattice (ℓ¹) distance between members of two sets.
pub fn set_distance(a: &SiteSet, b: &SiteSet) -> Result<u64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyArgument("set_distance needs two nonempty sets"));
    }
    let mut best = u64::MAX;
    for x in a {
        for y in b {
            best = best.min(x.ell1_distance(y));
            if best == 0 {
                return Ok(0);
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set1(xs: &[i64]) -> SiteSet {
        xs.iter().map(|&x| Site::from(x)).collect()
    }

    #[test]
    fn norms() {
        assert_eq!(ell1_norm(&Site::from([0, 0])), 0);
        assert_eq!(ell1_norm(&Site::from([1, -2, 3])), 6);
        assert_eq!(ell1_norm(&Site::from(5)), 5);
    }

    #[test]
    fn box_indexing_is_lexicographic() {
        let b = BoxDomain::new(Site::from([2, -1]), 2);
        assert_eq!(b.len(), 25);
        let sites: Vec<Site> = b.sites().collect();
        let mut sorted = sites.clone();
        sorted.sort();
        assert_eq!(sites, sorted);
        for (i, s) in sites.iter().enumerate() {
            assert_eq!(b.index_of(s), Some(i));
        }
        assert_eq!(b.index_of(&Site::from([5, 0])), None);
    }

    #[test]
    fn box_intersection() {
        let a = BoxDomain::centered(1, 3);
        let b = BoxDomain::new(Site::from(5), 3);
        assert_eq!(a.intersect(&b).unwrap(), set1(&[2, 3]));
        let c = BoxDomain::new(Site::from(20), 3);
        assert!(a.intersect(&c).is_none());
    }

    #[test]
    fn cube_neighborhood_examples() {
        let a = set1(&[0]);
        assert_eq!(cube_neighborhood(&a, 0), a);
        assert_eq!(cube_neighborhood(&a, 1), set1(&[-1, 0, 1]));
        let a2 = SiteSet::singleton(Site::from([0, 0]));
        assert_eq!(cube_neighborhood(&a2, 1).len(), 9);
    }

    #[test]
    fn components_examples() {
        assert!(connected_components(&SiteSet::new(), 1).is_empty());
        assert_eq!(
            connected_components(&set1(&[0, 1, 5]), 2),
            vec![set1(&[0, 1]), set1(&[5])]
        );
        assert_eq!(connected_components(&set1(&[0, 2]), 2), vec![set1(&[0, 2])]);
        // Diagonal steps count in the cube metric.
        let diag: SiteSet = [Site::from([0, 0]), Site::from([1, 1])].into_iter().collect();
        assert_eq!(connected_components(&diag, 1).len(), 1);
    }

    #[test]
    fn distance_examples() {
        assert_eq!(set_distance(&set1(&[0]), &set1(&[0])).unwrap(), 0);
        assert_eq!(set_distance(&set1(&[0]), &set1(&[7])).unwrap(), 7);
        let a = SiteSet::singleton(Site::from([0, 0]));
        let b = SiteSet::singleton(Site::from([1, 1]));
        assert_eq!(set_distance(&a, &b).unwrap(), 2);
        assert!(set_distance(&SiteSet::new(), &a).is_err());
    }
}
