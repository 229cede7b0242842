//! Named parameter storage shared by the model loader and the file codecs.

use alloc::{
    collections::BTreeMap,
    format,
    string::{String, ToString},
    vec::Vec,
};

use crate::{conv::ConvSpec, Error, Result, Shape, Tensor};

/// A tensor of arbitrary rank as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "named tensor",
                format!("dims {dims:?} need {len} values, got {}", data.len()),
            ));
        }
        Ok(NamedTensor { dims, data })
    }

    pub fn scalar(v: f32) -> Self {
        NamedTensor {
            dims: alloc::vec![1],
            data: alloc::vec![v],
        }
    }

    /// View as a rank-4 tensor, left-padding dims with ones.
    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.dims.len() > 4 {
            return Err(Error::shape("named tensor", format!("rank {} > 4", self.dims.len())));
        }
        let mut d = [1usize; 4];
        d[4 - self.dims.len()..].copy_from_slice(&self.dims);
        Tensor::new(Shape::new(d[0], d[1], d[2], d[3]), self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        NamedTensor {
            dims: t.shape().dims().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

/// Declared parameter: canonical name, dims and the fan-in used to scale its
/// random initialization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn new(name: String, dims: &[usize], fan_in: usize) -> Self {
        ParamSpec {
            name,
            dims: dims.to_vec(),
            fan_in,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Declare `{prefix}/weight` and optionally `{prefix}/bias` for a conv with
/// the given weight dims `(out, in_per_group, kH, kW)`.
pub fn conv_schema(out: &mut Vec<ParamSpec>, prefix: &str, dims: [usize; 4], with_bias: bool) {
    let fan_in = dims[1] * dims[2] * dims[3];
    out.push(ParamSpec::new(format!("{prefix}/weight"), &dims, fan_in));
    if with_bias {
        out.push(ParamSpec::new(format!("{prefix}/bias"), &[dims[0]], fan_in));
    }
}

/// Insertion-ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, NamedTensor)>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: NamedTensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Require `name` with exactly `dims`.
    pub fn require_dims(&self, name: &str, dims: &[usize]) -> Result<&NamedTensor> {
        let t = self.require(name)?;
        if t.dims != dims {
            return Err(Error::ParamShape {
                name: name.to_string(),
                expected: dims.to_vec(),
                found: t.dims.clone(),
            });
        }
        Ok(t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NamedTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.data.len()).sum()
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn subtree(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                // Names are unique in self, so they stay unique here.
                let _ = out.insert(rest, t.clone());
            }
        }
        out
    }

    /// Load a convolution stored as `{prefix}/weight` (+ optional `{prefix}/bias`).
    pub fn conv(
        &self,
        prefix: &str,
        weight_dims: [usize; 4],
        groups: usize,
        padding: usize,
        with_bias: bool,
    ) -> Result<ConvSpec> {
        let wname = format!("{prefix}/weight");
        let weight = self.require_dims(&wname, &weight_dims)?.to_tensor()?;
        let bias = if with_bias {
            let bname = format!("{prefix}/bias");
            Some(self.require_dims(&bname, &[weight_dims[0]])?.data.clone())
        } else {
            None
        };
        ConvSpec::new(weight, bias, groups, 1, padding)
    }

    pub fn insert_conv(&mut self, prefix: &str, spec: &ConvSpec) -> Result<()> {
        self.insert(format!("{prefix}/weight"), NamedTensor::from_tensor(&spec.weight))?;
        if let Some(b) = &spec.bias {
            self.insert(
                format!("{prefix}/bias"),
                NamedTensor {
                    dims: alloc::vec![b.len()],
                    data: b.clone(),
                },
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_and_missing() {
        let mut s = ParamStore::new();
        s.insert("a", NamedTensor::scalar(1.0)).unwrap();
        assert_eq!(
            s.insert("a", NamedTensor::scalar(2.0)),
            Err(Error::DuplicateParam("a".into()))
        );
        assert_eq!(s.require("b"), Err(Error::MissingParam("b".into())));
        assert!(matches!(s.require_dims("a", &[2]), Err(Error::ParamShape { .. })));
    }

    #[test]
    fn conv_round_trip_and_subtree() {
        let w = Tensor::full(Shape::new(2, 1, 3, 3), 0.5f32);
        let spec = ConvSpec::same(w, Some(alloc::vec![1.0, 2.0]), 2).unwrap();
        let mut s = ParamStore::new();
        s.insert_conv("x/dw", &spec).unwrap();
        let back = s.conv("x/dw", [2, 1, 3, 3], 2, 1, true).unwrap();
        assert_eq!(back, spec);
        let sub = s.subtree("x/");
        assert_eq!(sub.names().collect::<Vec<_>>(), ["dw/weight", "dw/bias"]);
        assert_eq!(s.scalar_count(), 20);
    }
}
