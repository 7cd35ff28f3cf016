//! Flat `key -> real` parameter maps used to configure built-in families and
//! observables.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

pub type Params = BTreeMap<String, f64>;

/// One documented parameter of a built-in.
#[derive(Clone, Copy, Debug)]
pub struct ParamSpec {
    pub name: &'static str,
    pub default: f64,
    pub help: &'static str,
}

/// Reads parameters with defaults and rejects keys nobody asked for.
pub(crate) struct ParamReader<'a> {
    params: &'a Params,
    seen: BTreeSet<&'a str>,
}

impl<'a> ParamReader<'a> {
    pub fn new(params: &'a Params) -> Self {
        Self {
            params,
            seen: BTreeSet::new(),
        }
    }

    pub fn get(&mut self, name: &'static str, default: f64) -> Result<f64> {
        match self.params.get_key_value(name) {
            Some((k, &v)) => {
                self.seen.insert(k.as_str());
                if !v.is_finite() {
                    return Err(Error::invalid(name, "must be finite"));
                }
                Ok(v)
            }
            None => Ok(default),
        }
    }

    pub fn finish(self) -> Result<()> {
        for key in self.params.keys() {
            if !self.seen.contains(key.as_str()) {
                return Err(Error::invalid(key.clone(), "unknown parameter"));
            }
        }
        Ok(())
    }
}

pub fn read_with_schema(schema: &[ParamSpec], params: &Params) -> Result<Params> {
    let mut reader = ParamReader::new(params);
    let mut out = Params::new();
    for spec in schema {
        out.insert(spec.name.to_string(), reader.get(spec.name, spec.default)?);
    }
    reader.finish()?;
    Ok(out)
}
