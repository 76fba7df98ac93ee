//! Line-oriented text checkpoints of whole trees.
//!
//! ```text
//! TREEGRAD-CKPT v1
//! fingerprint Reg<MyModule;>(Seq[Reg<Linear;>(*,*),Reg<Linear;>(*,*)],*,*)
//! leaves 6
//! leaf 0 array f64 (8,2) 3fe0...
//! leaf 4 static fn:relu
//! checksum 9c56...
//! ```
//!
//! Array bytes are little-endian, lowercase hex. Non-array leaves use their
//! canonical static text. The checksum is SHA-256 over every preceding byte.
//! Loading resolves node tags and function names against the registries.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pytree::{flatten, is_registered, unflatten, Fingerprint, FpNode, Leaf, PyTree};
use crate::tensor::{DType, Shape, Tensor};

pub const MAGIC: &str = "TREEGRAD-CKPT";
pub const VERSION: &str = "v1";

pub fn save(tree: &PyTree) -> Result<String> {
    let (leaves, fp) = flatten(tree);
    let mut out = format!(
        "{MAGIC} {VERSION}\nfingerprint {fp}\nleaves {}\n",
        leaves.len()
    );
    for (i, leaf) in leaves.iter().enumerate() {
        match leaf {
            Leaf::Array(a) => {
                let t = a.to_tensor()?;
                out.push_str(&format!(
                    "leaf {i} array {} {} {}\n",
                    t.dtype(),
                    compact_shape(t.shape()),
                    hex::encode(t.to_le_bytes())
                ));
            }
            other => out.push_str(&format!("leaf {i} static {}\n", other.static_text())),
        }
    }
    let digest = hex::encode(Sha256::digest(out.as_bytes()));
    out.push_str(&format!("checksum {digest}\n"));
    Ok(out)
}

pub fn save_to_path(tree: &PyTree, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, save(tree)?)?;
    Ok(())
}

pub fn load_from_path(path: impl AsRef<Path>) -> Result<PyTree> {
    load(&std::fs::read_to_string(path)?)
}

fn compact_shape(shape: &Shape) -> String {
    let dims: Vec<String> = shape.dims().iter().map(usize::to_string).collect();
    format!("({})", dims.join(","))
}

fn parse_shape(text: &str, line: usize) -> Result<Shape> {
    let inner = text
        .strip_prefix('(')
        .and_then(|t| t.strip_suffix(')'))
        .ok_or_else(|| decode(line, format!("bad shape `{text}`")))?;
    inner
        .split(',')
        .filter(|d| !d.is_empty())
        .map(|d| {
            d.parse()
                .map_err(|_| decode(line, format!("bad dimension `{d}`")))
        })
        .collect::<Result<Vec<usize>>>()
        .map(Shape::new)
}

fn decode(line: usize, detail: impl Into<String>) -> Error {
    Error::CheckpointDecode {
        line,
        detail: detail.into(),
    }
}

fn check_tags(node: &FpNode) -> Result<()> {
    match node {
        FpNode::Leaf => Ok(()),
        FpNode::Seq(c) | FpNode::Tup(c) => c.iter().try_for_each(check_tags),
        FpNode::Map(c) => c.iter().try_for_each(|(_, n)| check_tags(n)),
        FpNode::Reg { tag, children, .. } => {
            if !is_registered(tag) {
                return Err(Error::UnknownTag(tag.to_string()));
            }
            children.iter().try_for_each(check_tags)
        }
    }
}

pub fn load(text: &str) -> Result<PyTree> {
    let header = text.lines().next().unwrap_or("");
    match header.split_once(' ') {
        Some((MAGIC, VERSION)) => {}
        Some((MAGIC, found)) => {
            return Err(Error::CheckpointVersion {
                expected: VERSION.into(),
                found: found.into(),
            })
        }
        _ => return Err(decode(1, "not a checkpoint file")),
    }

    let body = text.strip_suffix('\n').unwrap_or(text);
    let (signed, last) = body
        .rsplit_once('\n')
        .ok_or_else(|| decode(1, "truncated file"))?;
    let digest = last
        .strip_prefix("checksum ")
        .ok_or_else(|| decode(body.lines().count(), "missing checksum line"))?;
    let expected = hex::encode(Sha256::digest(format!("{signed}\n").as_bytes()));
    if digest != expected {
        return Err(Error::CheckpointChecksum);
    }

    let mut lines = signed.lines().enumerate().skip(1).map(|(i, l)| (i + 1, l));
    let (n, fp_line) = lines
        .next()
        .ok_or_else(|| decode(2, "missing fingerprint"))?;
    let fp_text = fp_line
        .strip_prefix("fingerprint ")
        .ok_or_else(|| decode(n, "expected `fingerprint`"))?;
    let fp = parse_fingerprint(fp_text, n)?;
    check_tags(fp.root())?;

    let (n, count_line) = lines
        .next()
        .ok_or_else(|| decode(3, "missing leaf count"))?;
    let count: usize = count_line
        .strip_prefix("leaves ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| decode(n, "expected `leaves <count>`"))?;
    if count != fp.num_leaves() {
        return Err(Error::CheckpointLeafCount {
            expected: fp.num_leaves(),
            actual: count,
        });
    }

    let mut leaves = Vec::with_capacity(count);
    for (n, line) in lines {
        let mut parts = line.splitn(4, ' ');
        let (Some("leaf"), Some(index), Some(kind), Some(rest)) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(decode(n, "expected a leaf record"));
        };
        if index.parse::<usize>().ok() != Some(leaves.len()) {
            return Err(decode(n, format!("leaf index {index} out of order")));
        }
        leaves.push(match kind {
            "array" => decode_array(rest, n)?,
            "static" => Fingerprint::parse_static(rest).map_err(|e| match e {
                Error::UnknownFunction(_) => e,
                other => decode(n, other.to_string()),
            })?,
            other => return Err(decode(n, format!("unknown leaf kind `{other}`"))),
        });
    }
    if leaves.len() != count {
        return Err(Error::CheckpointLeafCount {
            expected: count,
            actual: leaves.len(),
        });
    }
    unflatten(&fp, leaves)
}

fn parse_fingerprint(text: &str, line: usize) -> Result<Fingerprint> {
    Fingerprint::parse(text).map_err(|e| match e {
        Error::UnknownFunction(_) => e,
        other => decode(line, other.to_string()),
    })
}

fn decode_array(rest: &str, line: usize) -> Result<Leaf> {
    let mut parts = rest.splitn(3, ' ');
    let (Some(dtype), Some(shape), Some(data)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(decode(line, "expected `<dtype> <shape> <hex>`"));
    };
    let dtype =
        DType::from_name(dtype).ok_or_else(|| decode(line, format!("unknown dtype `{dtype}`")))?;
    let shape = parse_shape(shape, line)?;
    let bytes = hex::decode(data).map_err(|e| decode(line, e.to_string()))?;
    let t = Tensor::from_le_bytes(shape, dtype, &bytes).map_err(|e| decode(line, e.to_string()))?;
    Ok(Leaf::array(t))
}
