use std::path::PathBuf;
use std::str::FromStr;

use sit_core::data::{load_cifar, load_stl10, synthetic_dataset, CifarVariant, StlSplit, SYNTHETIC_CLASSES};
use sit_core::{Dataset, Result, Split};

/// Where images come from: `cifar10:DIR`, `cifar100:DIR`, `stl10:DIR`,
/// `synthetic` or `synthetic:SEED`.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Cifar(CifarVariant, PathBuf),
    Stl10(PathBuf),
    Synthetic { seed: u64 },
}

impl FromStr for DataSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (kind, rest) = match s.split_once(':') {
            Some((k, r)) => (k, Some(r)),
            None => (s, None),
        };
        let dir = |r: Option<&str>| -> std::result::Result<PathBuf, String> {
            match r {
                Some(d) if !d.is_empty() => Ok(PathBuf::from(d)),
                _ => Err(format!("`{kind}` needs a directory, as in `{kind}:DIR`")),
            }
        };
        match kind {
            "cifar10" => Ok(DataSpec::Cifar(CifarVariant::Cifar10, dir(rest)?)),
            "cifar100" => Ok(DataSpec::Cifar(CifarVariant::Cifar100, dir(rest)?)),
            "stl10" => Ok(DataSpec::Stl10(dir(rest)?)),
            "synthetic" => {
                let seed = match rest {
                    Some(r) => r.parse().map_err(|_| format!("bad synthetic seed `{r}`"))?,
                    None => 0,
                };
                Ok(DataSpec::Synthetic { seed })
            }
            _ => Err(format!("unknown dataset `{kind}`; expected cifar10:DIR, cifar100:DIR, stl10:DIR or synthetic")),
        }
    }
}

/// What the images are used for, which decides the split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Pretrain,
    Train,
    Test,
}

impl DataSpec {
    /// Load the split for `role`, keeping at most `limit` images. Synthetic
    /// data is rendered at `size` pixels with `limit` images (default 512);
    /// its test split uses a different seed.
    pub fn load(&self, role: Role, limit: Option<usize>, size: usize) -> Result<Dataset> {
        let ds = match self {
            DataSpec::Cifar(variant, dir) => {
                let split = if role == Role::Test { Split::Test } else { Split::Train };
                load_cifar(dir, *variant, split)?
            }
            DataSpec::Stl10(dir) => {
                let split = match role {
                    Role::Pretrain => StlSplit::Unlabeled,
                    Role::Train => StlSplit::Train,
                    Role::Test => StlSplit::Test,
                };
                load_stl10(dir, split)?
            }
            DataSpec::Synthetic { seed } => {
                let n = limit.unwrap_or(512);
                let seed = if role == Role::Test { seed ^ 0x7e57 } else { *seed };
                let mut ds = synthetic_dataset(n, SYNTHETIC_CLASSES, size, seed)?;
                if role == Role::Test {
                    ds.name = format!("{}-test", ds.name);
                }
                return Ok(ds);
            }
        };
        match limit {
            Some(n) if n < ds.len() => ds.take(n),
            _ => Ok(ds),
        }
    }
}
