use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeType {
    pub name: String,
    /// Optional declared size; ids must stay below it when present.
    pub count: Option<usize>,
}

/// A directed edge type between two node types (indices into the node list).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeType {
    pub name: String,
    pub src: usize,
    pub dst: usize,
}

/// Declared node and edge types.
///
/// Text form, one declaration per line:
///
/// ```text
/// node <name> [count]
/// edge <name> <src_type> <dst_type>
/// ```
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Schema {
    pub node_types: Vec<NodeType>,
    pub edge_types: Vec<EdgeType>,
}

impl Schema {
    /// The five node types and seven edge types of a MOOC platform.
    pub fn mooc() -> Self {
        let mut s = Schema::default();
        for n in ["user", "concept", "course", "video", "teacher"] {
            s.node_types.push(NodeType {
                name: n.into(),
                count: None,
            });
        }
        for (name, src, dst) in [
            ("click", "user", "concept"),
            ("watch", "user", "video"),
            ("learn", "user", "course"),
            ("video_has", "video", "concept"),
            ("course_has", "course", "concept"),
            ("course_video", "course", "video"),
            ("taught_by", "course", "teacher"),
        ] {
            let src = s.node_index(src).expect("declared above");
            let dst = s.node_index(dst).expect("declared above");
            s.edge_types.push(EdgeType {
                name: name.into(),
                src,
                dst,
            });
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut schema = Schema::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Schema { line: line_no, msg };
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["node", name] | ["node", name, _] => {
                    if schema.node_index(name).is_some() {
                        return Err(err(format!("node type `{name}` declared twice")));
                    }
                    let count = match f.get(2) {
                        Some(c) => Some(
                            c.parse::<usize>()
                                .map_err(|_| err(format!("bad node count `{c}`")))?,
                        ),
                        None => None,
                    };
                    schema.node_types.push(NodeType {
                        name: (*name).to_string(),
                        count,
                    });
                }
                ["edge", name, src, dst] => {
                    if schema.edge_index(name).is_some() {
                        return Err(err(format!("edge type `{name}` declared twice")));
                    }
                    let src_idx = schema
                        .node_index(src)
                        .ok_or_else(|| err(format!("unknown node type `{src}`")))?;
                    let dst_idx = schema
                        .node_index(dst)
                        .ok_or_else(|| err(format!("unknown node type `{dst}`")))?;
                    schema.edge_types.push(EdgeType {
                        name: (*name).to_string(),
                        src: src_idx,
                        dst: dst_idx,
                    });
                }
                _ => return Err(err(format!("cannot parse `{line}`"))),
            }
        }
        if schema.node_types.is_empty() {
            return Err(Error::Schema {
                line: 0,
                msg: "no node types declared".into(),
            });
        }
        Ok(schema)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for n in &self.node_types {
            match n.count {
                Some(c) => writeln!(s, "node {} {c}", n.name),
                None => writeln!(s, "node {}", n.name),
            }
            .expect("string write");
        }
        for e in &self.edge_types {
            writeln!(
                s,
                "edge {} {} {}",
                e.name, self.node_types[e.src].name, self.node_types[e.dst].name
            )
            .expect("string write");
        }
        s
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.node_types.iter().position(|n| n.name == name)
    }

    pub fn edge_index(&self, name: &str) -> Option<usize> {
        self.edge_types.iter().position(|e| e.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mooc_schema_shape() {
        let s = Schema::mooc();
        assert_eq!(s.node_types.len(), 5);
        assert_eq!(s.edge_types.len(), 7);
        assert_eq!(Schema::parse(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn undeclared_node_type_named() {
        let err = Schema::parse("node user\nedge e user X\n").unwrap_err();
        match err {
            Error::Schema { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("`X`"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        assert!(Schema::parse("node a\nnode a\n").is_err());
        assert!(Schema::parse("node a\nedge e a a\nedge e a a\n").is_err());
        assert!(Schema::parse("nodes a\n").is_err());
    }
}
