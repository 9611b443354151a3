use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub parent: String,
    pub child: String,
}

impl Link {
    pub fn new(parent: &str, child: &str) -> Self {
        Link {
            parent: parent.to_string(),
            child: child.to_string(),
        }
    }
}

/// A tree of links rooted at one marker, in topological order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChainTopology {
    root: String,
    links: Vec<Link>,
    /// For each link, the index of its parent in `markers()`.
    parents: Vec<usize>,
}

impl ChainTopology {
    pub fn new(root: &str, links: Vec<Link>) -> Result<Self> {
        if links.is_empty() {
            return Err(Error::InvalidChain("chain has no links".into()));
        }
        let mut seen: Vec<&str> = vec![root];
        let mut parents = Vec::with_capacity(links.len());
        for (i, l) in links.iter().enumerate() {
            if l.child == root {
                return Err(Error::InvalidChain(format!("link {i}: root `{root}` used as a child")));
            }
            if seen.contains(&l.child.as_str()) {
                return Err(Error::InvalidChain(format!("link {i}: `{}` is a child more than once", l.child)));
            }
            let Some(p) = seen.iter().position(|m| *m == l.parent) else {
                return Err(Error::InvalidChain(format!(
                    "link {i}: parent `{}` is not reached by an earlier link",
                    l.parent
                )));
            };
            parents.push(p);
            seen.push(&l.child);
        }
        Ok(ChainTopology {
            root: root.to_string(),
            links,
            parents,
        })
    }

    pub fn root(&self) -> &str {
        &self.root
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    /// Root followed by each link's child.
    pub fn markers(&self) -> Vec<String> {
        std::iter::once(self.root.clone())
            .chain(self.links.iter().map(|l| l.child.clone()))
            .collect()
    }

    pub fn parent_indices(&self) -> &[usize] {
        &self.parents
    }
}

/// Chain topology plus one constant length per link.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonChain {
    topology: ChainTopology,
    distances: Vec<f64>,
}

impl SkeletonChain {
    pub fn new(topology: ChainTopology, distances: Vec<f64>) -> Result<Self> {
        if distances.len() != topology.links.len() {
            return Err(Error::InvalidChain(format!(
                "{} distances for {} links",
                distances.len(),
                topology.links.len()
            )));
        }
        if let Some(i) = distances.iter().position(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::InvalidChain(format!("distance {i} must be positive, got {}", distances[i])));
        }
        Ok(SkeletonChain { topology, distances })
    }

    pub fn topology(&self) -> &ChainTopology {
        &self.topology
    }

    pub fn links(&self) -> &[Link] {
        &self.topology.links
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn to_file(&self) -> ChainFile {
        ChainFile {
            root: self.topology.root.clone(),
            links: self.topology.links.clone(),
            distances: Some(self.distances.clone()),
        }
    }

    pub fn from_file(file: ChainFile) -> Result<Self> {
        let distances = file
            .distances
            .clone()
            .ok_or_else(|| Error::InvalidChain("chain has no distances".into()))?;
        SkeletonChain::new(file.topology()?, distances)
    }
}

/// On-disk chain description: `{root, links: [{parent, child}], distances?}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainFile {
    pub root: String,
    pub links: Vec<Link>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distances: Option<Vec<f64>>,
}

impl ChainFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn topology(&self) -> Result<ChainTopology> {
        ChainTopology::new(&self.root, self.links.clone())
    }

    /// Markers named anywhere in the file.
    pub fn marker_names(&self) -> HashSet<&str> {
        std::iter::once(self.root.as_str())
            .chain(self.links.iter().flat_map(|l| [l.parent.as_str(), l.child.as_str()]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_trees() {
        assert!(ChainTopology::new("A", vec![Link::new("A", "B"), Link::new("A", "B")]).is_err());
        assert!(ChainTopology::new("A", vec![Link::new("B", "C"), Link::new("A", "B")]).is_err());
        assert!(ChainTopology::new("A", vec![Link::new("B", "A")]).is_err());
        assert!(ChainTopology::new("A", vec![]).is_err());
        let t = ChainTopology::new("A", vec![Link::new("A", "B"), Link::new("B", "C"), Link::new("A", "D")]).unwrap();
        assert_eq!(t.parent_indices(), &[0, 1, 0]);
        assert_eq!(t.markers(), vec!["A", "B", "C", "D"]);
    }

    #[test]
    fn distances_must_be_positive() {
        let t = ChainTopology::new("A", vec![Link::new("A", "B")]).unwrap();
        assert!(SkeletonChain::new(t.clone(), vec![0.0]).is_err());
        assert!(SkeletonChain::new(t.clone(), vec![1.0, 2.0]).is_err());
        assert!(SkeletonChain::new(t, vec![0.3]).is_ok());
    }

    #[test]
    fn json_shape() {
        let f: ChainFile = serde_json::from_str(r#"{"root":"A","links":[{"parent":"A","child":"B"}]}"#).unwrap();
        assert!(f.distances.is_none());
        assert!(SkeletonChain::from_file(f.clone()).is_err());
        assert_eq!(f.topology().unwrap().links().len(), 1);
    }
}
