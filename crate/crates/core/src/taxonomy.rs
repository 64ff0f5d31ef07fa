//! Three-level class hierarchy (super-class, parent class, object class) and
//! a synthetic Gaussian dataset whose geometry follows the hierarchy.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, tag, Rng};

pub type ClassId = u32;

/// The layout bundled with the crate: 8 super-classes, 20 parents, 100 classes.
pub const CIFAR_LAYOUT: &str = include_str!("../data/cifar_layout.taxonomy");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentClass {
    pub name: String,
    pub classes: Vec<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperClass {
    pub name: String,
    pub parents: Vec<ParentClass>,
}

/// Location of a parent class inside the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParentRef {
    pub superclass: usize,
    pub parent: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    superclasses: Vec<SuperClass>,
    /// Indexed by class id.
    class_parent: Vec<ParentRef>,
}

impl Taxonomy {
    pub fn new(superclasses: Vec<SuperClass>) -> Result<Self> {
        let mut seen: HashMap<ClassId, ParentRef> = HashMap::new();
        let mut parent_names: HashMap<&str, usize> = HashMap::new();
        for (si, s) in superclasses.iter().enumerate() {
            for (pi, p) in s.parents.iter().enumerate() {
                if let Some(&other) = parent_names.get(p.name.as_str()) {
                    if other != si {
                        return Err(Error::Structural(format!(
                            "parent class '{}' assigned to super-classes '{}' and '{}'",
                            p.name, superclasses[other].name, s.name
                        )));
                    }
                    return Err(Error::Structural(format!(
                        "parent class '{}' listed twice in super-class '{}'",
                        p.name, s.name
                    )));
                }
                parent_names.insert(&p.name, si);
                if p.classes.is_empty() {
                    return Err(Error::Structural(format!("parent class '{}' is empty", p.name)));
                }
                for &c in &p.classes {
                    if seen.insert(c, ParentRef { superclass: si, parent: pi }).is_some() {
                        return Err(Error::Structural(format!("duplicate class id {c}")));
                    }
                }
            }
        }
        if seen.is_empty() {
            return Err(Error::Structural("taxonomy contains no classes".into()));
        }
        let m = seen.len();
        let mut class_parent = Vec::with_capacity(m);
        for c in 0..m as ClassId {
            match seen.get(&c) {
                Some(&r) => class_parent.push(r),
                None => {
                    let max = seen.keys().max().copied().unwrap_or(0);
                    return Err(Error::Structural(format!(
                        "class ids must be a permutation of 0..{m}; id {c} is missing (largest id {max})"
                    )));
                }
            }
        }
        Ok(Self {
            superclasses,
            class_parent,
        })
    }

    /// Parses the `superclass_name,parentclass_name,class_id` line format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut superclasses: Vec<SuperClass> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 || fields[0].is_empty() || fields[1].is_empty() {
                return Err(Error::Structural(format!(
                    "line {}: expected 'superclass,parent,class_id', got '{line}'",
                    lineno + 1
                )));
            }
            let id: ClassId = fields[2].parse().map_err(|_| {
                Error::Structural(format!(
                    "line {}: class id '{}' is not a base-10 integer",
                    lineno + 1,
                    fields[2]
                ))
            })?;
            let si = match superclasses.iter().position(|s| s.name == fields[0]) {
                Some(i) => i,
                None => {
                    superclasses.push(SuperClass {
                        name: fields[0].to_string(),
                        parents: Vec::new(),
                    });
                    superclasses.len() - 1
                }
            };
            // A parent name already registered under another super-class is
            // rejected here, before Taxonomy::new sees the flattened form.
            if let Some(other) = superclasses
                .iter()
                .enumerate()
                .find(|(i, s)| *i != si && s.parents.iter().any(|p| p.name == fields[1]))
            {
                return Err(Error::Structural(format!(
                    "line {}: parent class '{}' assigned to super-classes '{}' and '{}'",
                    lineno + 1,
                    fields[1],
                    other.1.name,
                    fields[0]
                )));
            }
            let parents = &mut superclasses[si].parents;
            match parents.iter_mut().find(|p| p.name == fields[1]) {
                Some(p) => p.classes.push(id),
                None => parents.push(ParentClass {
                    name: fields[1].to_string(),
                    classes: vec![id],
                }),
            }
        }
        if superclasses.is_empty() {
            return Err(Error::Structural("empty taxonomy file".into()));
        }
        Self::new(superclasses)
    }

    pub fn cifar_layout() -> Self {
        Self::parse(CIFAR_LAYOUT).expect("bundled taxonomy is valid")
    }

    /// Canonical text form; `parse(to_text())` reproduces the same structure.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# superclass_name,parentclass_name,class_id\n");
        for s in &self.superclasses {
            for p in &s.parents {
                for c in &p.classes {
                    let _ = writeln!(out, "{},{},{}", s.name, p.name, c);
                }
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn superclasses(&self) -> &[SuperClass] {
        &self.superclasses
    }

    pub fn n_classes(&self) -> usize {
        self.class_parent.len()
    }

    pub fn n_parents(&self) -> usize {
        self.superclasses.iter().map(|s| s.parents.len()).sum()
    }

    /// Parents in file order, flattened across super-classes.
    pub fn parents(&self) -> impl Iterator<Item = (ParentRef, &ParentClass)> {
        self.superclasses.iter().enumerate().flat_map(|(si, s)| {
            s.parents.iter().enumerate().map(move |(pi, p)| {
                (
                    ParentRef {
                        superclass: si,
                        parent: pi,
                    },
                    p,
                )
            })
        })
    }

    pub fn parent(&self, r: ParentRef) -> &ParentClass {
        &self.superclasses[r.superclass].parents[r.parent]
    }

    pub fn parent_of(&self, class: ClassId) -> Option<ParentRef> {
        self.class_parent.get(class as usize).copied()
    }

    pub fn superclass_classes(&self, superclass: usize) -> Vec<ClassId> {
        self.superclasses[superclass]
            .parents
            .iter()
            .flat_map(|p| p.classes.iter().copied())
            .collect()
    }
}

pub fn load_taxonomy(path: impl AsRef<Path>) -> Result<Taxonomy> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Taxonomy::parse(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// Flat feature storage with per-class index lists for both splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<ClassId>,
    splits: Vec<Split>,
    train_by_class: Vec<Vec<usize>>,
    test_by_class: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn from_parts(
        dim: usize,
        n_classes: usize,
        features: Vec<f64>,
        labels: Vec<ClassId>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim || splits.len() != labels.len() {
            return Err(Error::Data("inconsistent dataset dimensions".into()));
        }
        let mut train_by_class = vec![Vec::new(); n_classes];
        let mut test_by_class = vec![Vec::new(); n_classes];
        for (i, (&y, &s)) in labels.iter().zip(&splits).enumerate() {
            let slot = match s {
                Split::Train => train_by_class.get_mut(y as usize),
                Split::Test => test_by_class.get_mut(y as usize),
            };
            slot.ok_or_else(|| Error::Data(format!("label {y} outside 0..{n_classes}")))?
                .push(i);
        }
        Ok(Self {
            dim,
            features,
            labels,
            splits,
            train_by_class,
            test_by_class,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.train_by_class.len()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> ClassId {
        self.labels[i]
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn train_indices(&self, class: ClassId) -> &[usize] {
        self.train_by_class
            .get(class as usize)
            .map_or(&[], Vec::as_slice)
    }

    pub fn test_indices(&self, class: ClassId) -> &[usize] {
        self.test_by_class
            .get(class as usize)
            .map_or(&[], Vec::as_slice)
    }

    pub fn train_pool(&self, classes: &[ClassId]) -> Vec<usize> {
        classes
            .iter()
            .flat_map(|&c| self.train_indices(c).iter().copied())
            .collect()
    }

    pub fn test_pool(&self, classes: &[ClassId]) -> Vec<usize> {
        classes
            .iter()
            .flat_map(|&c| self.test_indices(c).iter().copied())
            .collect()
    }

    /// Gathers the features of `indices` into one row-major buffer.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            out.extend_from_slice(self.feature(i));
        }
        out
    }
}

/// Radii of the hierarchical center layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HierarchyGeometry {
    pub superclass_radius: f64,
    pub parent_jitter: f64,
    pub class_jitter: f64,
    pub cluster_std: f64,
}

impl Default for HierarchyGeometry {
    fn default() -> Self {
        Self {
            superclass_radius: 10.0,
            parent_jitter: 3.0,
            class_jitter: 1.0,
            cluster_std: 1.0,
        }
    }
}

/// Class-conditional isotropic Gaussians with hierarchically placed means.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalGaussian {
    dim: usize,
    std: f64,
    /// Row per class id.
    centers: Vec<f64>,
}

fn random_direction(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl HierarchicalGaussian {
    /// Super-class centers lie on a sphere of `superclass_radius`; each parent
    /// sits at distance `parent_jitter` from its super-class center and each
    /// class at distance `class_jitter` from its parent center.
    pub fn new(taxonomy: &Taxonomy, dim: usize, geometry: HierarchyGeometry, seed: u64) -> Self {
        let mut rng = derive_rng(seed, &[tag::CENTERS]);
        let mut centers = vec![0.0; taxonomy.n_classes() * dim];
        for s in taxonomy.superclasses() {
            let sc: Vec<f64> = random_direction(&mut rng, dim)
                .into_iter()
                .map(|x| x * geometry.superclass_radius)
                .collect();
            for p in &s.parents {
                let dir = random_direction(&mut rng, dim);
                let pc: Vec<f64> = sc
                    .iter()
                    .zip(&dir)
                    .map(|(c, u)| c + geometry.parent_jitter * u)
                    .collect();
                for &c in &p.classes {
                    let dir = random_direction(&mut rng, dim);
                    let row = &mut centers[c as usize * dim..(c as usize + 1) * dim];
                    for ((r, base), u) in row.iter_mut().zip(&pc).zip(&dir) {
                        *r = base + geometry.class_jitter * u;
                    }
                }
            }
        }
        Self {
            dim,
            std: geometry.cluster_std,
            centers,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self, class: ClassId) -> &[f64] {
        &self.centers[class as usize * self.dim..(class as usize + 1) * self.dim]
    }

    pub fn sample_into(&self, class: ClassId, rng: &mut Rng, out: &mut Vec<f64>) {
        for &c in self.center(class) {
            let z: f64 = StandardNormal.sample(rng);
            out.push(c + self.std * z);
        }
    }

    /// Draws `n` fresh points of `class`.
    pub fn sample(&self, class: ClassId, n: usize, rng: &mut Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            self.sample_into(class, rng, &mut out);
        }
        out
    }
}

/// Builds a dataset with `per_class_train` + `per_class_test` points for
/// every class of `taxonomy`. Deterministic in `seed`.
pub fn synthetic_dataset(
    taxonomy: &Taxonomy,
    per_class_train: usize,
    per_class_test: usize,
    dim: usize,
    seed: u64,
) -> Result<Dataset> {
    synthetic_dataset_with(
        taxonomy,
        per_class_train,
        per_class_test,
        dim,
        HierarchyGeometry::default(),
        seed,
    )
    .map(|(d, _)| d)
}

pub fn synthetic_dataset_with(
    taxonomy: &Taxonomy,
    per_class_train: usize,
    per_class_test: usize,
    dim: usize,
    geometry: HierarchyGeometry,
    seed: u64,
) -> Result<(Dataset, HierarchicalGaussian)> {
    if per_class_train == 0 || per_class_test == 0 {
        return Err(Error::Config("per-class counts must be at least 1".into()));
    }
    if dim < 2 {
        return Err(Error::Config(format!("feature dimension must be >= 2, got {dim}")));
    }
    let generator = HierarchicalGaussian::new(taxonomy, dim, geometry, seed);
    let m = taxonomy.n_classes();
    let per_class = per_class_train + per_class_test;
    let mut rng = derive_rng(seed, &[tag::SAMPLES]);
    let mut features = Vec::with_capacity(m * per_class * dim);
    let mut labels = Vec::with_capacity(m * per_class);
    let mut splits = Vec::with_capacity(m * per_class);
    for c in 0..m as ClassId {
        for k in 0..per_class {
            generator.sample_into(c, &mut rng, &mut features);
            labels.push(c);
            splits.push(if k < per_class_train {
                Split::Train
            } else {
                Split::Test
            });
        }
    }
    let ds = Dataset::from_parts(dim, m, features, labels, splits)?;
    Ok((ds, generator))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_taxonomy() {
        let t = Taxonomy::parse("a,b,0\n").unwrap();
        assert_eq!(t.n_classes(), 1);
        assert_eq!(t.n_parents(), 1);
    }

    #[test]
    fn bundled_layout_shape() {
        let t = Taxonomy::cifar_layout();
        assert_eq!(t.superclasses().len(), 8);
        assert_eq!(t.n_parents(), 20);
        assert_eq!(t.n_classes(), 100);
        assert!(t.parents().all(|(_, p)| p.classes.len() == 5));
        // unbalanced super-classes
        let sizes: Vec<usize> = t.superclasses().iter().map(|s| s.parents.len()).collect();
        assert!(sizes.iter().min() != sizes.iter().max());
    }

    #[test]
    fn duplicate_class_is_rejected_with_its_id() {
        let err = Taxonomy::parse("s,p,0\ns,p,1\ns,q,7\ns,r,7\n").unwrap_err();
        assert!(matches!(&err, Error::Structural(m) if m.contains('7')), "{err}");
    }

    #[test]
    fn parent_under_two_superclasses_is_rejected() {
        let err = Taxonomy::parse("s1,p,0\ns2,p,1\n").unwrap_err();
        assert!(matches!(err, Error::Structural(_)));
    }

    #[test]
    fn empty_and_comment_only_files_are_rejected() {
        assert!(matches!(Taxonomy::parse(""), Err(Error::Structural(_))));
        assert!(matches!(Taxonomy::parse("# nothing\n\n"), Err(Error::Structural(_))));
    }

    #[test]
    fn non_dense_ids_are_rejected() {
        assert!(matches!(Taxonomy::parse("s,p,0\ns,p,2\n"), Err(Error::Structural(_))));
    }

    #[test]
    fn file_order_is_preserved() {
        let t = Taxonomy::parse("z,q,1\na,p,0\nz,q,2\n").unwrap();
        assert_eq!(t.superclasses()[0].name, "z");
        assert_eq!(t.superclasses()[0].parents[0].classes, vec![1, 2]);
        assert_eq!(t.parent_of(0).unwrap().superclass, 1);
    }

    #[test]
    fn minimal_dataset() {
        let t = Taxonomy::parse("a,b,0\n").unwrap();
        let d = synthetic_dataset(&t, 10, 5, 2, 0).unwrap();
        assert_eq!(d.len(), 15);
        assert!((0..d.len()).all(|i| d.label(i) == 0));
        assert_eq!(d.train_indices(0).len(), 10);
        assert_eq!(d.test_indices(0).len(), 5);
    }

    #[test]
    fn bundled_dataset_sizes() {
        let t = Taxonomy::cifar_layout();
        let d = synthetic_dataset(&t, 100, 20, 16, 1).unwrap();
        let train = (0..d.len()).filter(|&i| d.split(i) == Split::Train).count();
        assert_eq!(train, 10_000);
        assert_eq!(d.len() - train, 2_000);
    }

    #[test]
    fn dataset_is_deterministic() {
        let t = Taxonomy::cifar_layout();
        let a = synthetic_dataset(&t, 3, 2, 8, 42).unwrap();
        let b = synthetic_dataset(&t, 3, 2, 8, 42).unwrap();
        assert_eq!(a, b);
        let c = synthetic_dataset(&t, 3, 2, 8, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn preconditions() {
        let t = Taxonomy::parse("a,b,0\n").unwrap();
        assert!(synthetic_dataset(&t, 0, 1, 2, 0).is_err());
        assert!(synthetic_dataset(&t, 1, 1, 1, 0).is_err());
    }
}
