//! Named, grouped parameter storage with per-group freeze flags.

use rand::Rng;

use crate::error::{NnError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub group: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup<T> {
    pub name: String,
    pub frozen: bool,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamGroup<T> {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    groups: Vec<ParamGroup<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { groups: Vec::new() }
    }

    pub fn add_group(&mut self, name: &str) -> Result<usize> {
        if self.group_index(name).is_some() {
            return Err(NnError::Config(format!("duplicate parameter group '{name}'")));
        }
        self.groups.push(ParamGroup {
            name: name.to_string(),
            frozen: false,
            names: Vec::new(),
            tensors: Vec::new(),
        });
        Ok(self.groups.len() - 1)
    }

    pub fn add(&mut self, group: usize, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        let g = self
            .groups
            .get_mut(group)
            .ok_or_else(|| NnError::Config(format!("no parameter group #{group}")))?;
        if g.names.iter().any(|n| n == name) {
            return Err(NnError::Config(format!("duplicate tensor '{name}' in group '{}'", g.name)));
        }
        g.names.push(name.to_string());
        g.tensors.push(tensor);
        Ok(ParamId { group, index: g.tensors.len() - 1 })
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn groups(&self) -> &[ParamGroup<T>] {
        &self.groups
    }

    pub fn group(&self, idx: usize) -> &ParamGroup<T> {
        &self.groups[idx]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.groups[id.group].tensors[id.index]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.groups[id.group].tensors[id.index]
    }

    /// Looks up `group.tensor`.
    pub fn find(&self, full_name: &str) -> Option<ParamId> {
        let (g, t) = full_name.split_once('.')?;
        let group = self.group_index(g)?;
        let index = self.groups[group].names.iter().position(|n| n == t)?;
        Some(ParamId { group, index })
    }

    pub fn full_name(&self, id: ParamId) -> String {
        let g = &self.groups[id.group];
        format!("{}.{}", g.name, g.names[id.index])
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.groups[id.group].frozen
    }

    pub fn set_frozen(&mut self, group: &str, frozen: bool) -> Result<()> {
        let idx = self
            .group_index(group)
            .ok_or_else(|| NnError::Config(format!("no parameter group '{group}'")))?;
        self.groups[idx].frozen = frozen;
        Ok(())
    }

    pub fn freeze_all(&mut self, frozen: bool) {
        for g in &mut self.groups {
            g.frozen = frozen;
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(group, g)| (0..g.tensors.len()).map(move |index| ParamId { group, index }))
    }

    pub fn num_params(&self) -> usize {
        self.groups.iter().flat_map(|g| g.tensors.iter()).map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            groups: self
                .groups
                .iter()
                .map(|g| ParamGroup {
                    name: g.name.clone(),
                    frozen: g.frozen,
                    names: g.names.clone(),
                    tensors: g.tensors.iter().map(|t| t.cast()).collect(),
                })
                .collect(),
        }
    }

    /// Bitwise comparison of one group's tensors between two stores.
    pub fn group_bits_equal(&self, other: &ParamStore<T>, group: &str) -> bool {
        match (self.group_index(group), other.group_index(group)) {
            (Some(a), Some(b)) => {
                let (ga, gb) = (&self.groups[a], &other.groups[b]);
                ga.names == gb.names
                    && ga.tensors.iter().zip(&gb.tensors).all(|(x, y)| {
                        x.shape() == y.shape()
                            && x.data().iter().zip(y.data()).all(|(p, q)| p.as_f64().to_bits() == q.as_f64().to_bits())
                    })
            }
            _ => false,
        }
    }
}

// ── initializers ─────────────────────────────────────────────────────────────

/// Glorot/Xavier uniform init for a `fan_in × fan_out` weight.
pub fn xavier_uniform<T: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive dims")
}

/// Entries uniform in `[-scale, scale)`.
pub fn uniform<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::lit(rng.gen_range(-scale..scale))).collect();
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique_per_group() {
        let mut s = ParamStore::<f32>::new();
        let g = s.add_group("enc").unwrap();
        s.add(g, "w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(s.add(g, "w", Tensor::zeros(&[2, 2])).is_err());
        assert!(s.add_group("enc").is_err());
        let h = s.add_group("head").unwrap();
        let id = s.add(h, "w", Tensor::zeros(&[1, 3])).unwrap();
        assert_eq!(s.find("head.w"), Some(id));
        assert_eq!(s.full_name(id), "head.w");
        assert_eq!(s.num_params(), 7);
    }

    #[test]
    fn xavier_is_seeded() {
        let a: Tensor<f32> = xavier_uniform(&mut ChaCha8Rng::seed_from_u64(3), 4, 5);
        let b: Tensor<f32> = xavier_uniform(&mut ChaCha8Rng::seed_from_u64(3), 4, 5);
        assert_eq!(a, b);
        let bound = (6.0f32 / 9.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }
}
