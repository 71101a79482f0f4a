//! Compact binary serialization of built patient graphs, used for the graph
//! cache so k-NN construction runs once per (manifest, parameters) pair.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Edge, EdgeType, PatchRecord, PatientGraph};

pub const GRAPH_MAGIC: &[u8; 4] = b"BXG1";

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn string(&mut self, s: &str) {
        self.u32(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated graph file",
                self.path.display()
            )));
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()?;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format(format!("{}: invalid utf-8", self.path.display())))
    }
}

pub fn write_patient_graph(path: &Path, graph: &PatientGraph) -> Result<()> {
    let mut slides: Vec<&str> = graph.nodes.iter().map(|n| n.slide_id.as_str()).collect();
    slides.sort_unstable();
    slides.dedup();
    let mut stains: Vec<&str> = graph.nodes.iter().map(|n| n.stain.as_str()).collect();
    stains.sort_unstable();
    stains.dedup();

    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(GRAPH_MAGIC);
    w.string(&graph.patient_id);
    w.u32(slides.len());
    for s in &slides {
        w.string(s);
    }
    w.u32(stains.len());
    for s in &stains {
        w.string(s);
    }
    let d = graph.nodes.first().map_or(0, |n| n.feature.len());
    w.u32(graph.nodes.len());
    w.u32(d);
    for node in &graph.nodes {
        if node.feature.len() != d {
            return Err(Error::Format("ragged feature rows in graph".into()));
        }
        w.u32(slides.binary_search(&node.slide_id.as_str()).unwrap());
        w.u32(stains.binary_search(&node.stain.as_str()).unwrap());
        w.u32(node.stack_index as usize);
        w.f64(node.x);
        w.f64(node.y);
        for v in &node.feature {
            w.f64(*v);
        }
    }
    w.u32(graph.edges.len());
    for e in &graph.edges {
        w.u32(e.u);
        w.u32(e.v);
        w.buf.push(match e.kind {
            EdgeType::Fs => 0,
            EdgeType::Ra => 1,
            EdgeType::Both => 2,
        });
    }
    for &id in &graph.original_ids {
        w.u32(id);
    }
    fs::write(path, w.buf)?;
    Ok(())
}

pub fn read_patient_graph(path: &Path) -> Result<PatientGraph> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || &bytes[0..4] != GRAPH_MAGIC {
        return Err(Error::Format(format!(
            "{} is not a graph file",
            path.display()
        )));
    }
    let mut r = Reader {
        bytes: &bytes,
        off: 4,
        path,
    };
    let patient_id = r.string()?;
    let n_slides = r.u32()?;
    let slides: Vec<String> = (0..n_slides).map(|_| r.string()).collect::<Result<_>>()?;
    let n_stains = r.u32()?;
    let stains: Vec<String> = (0..n_stains).map(|_| r.string()).collect::<Result<_>>()?;
    let n = r.u32()?;
    let d = r.u32()?;
    let mut nodes = Vec::with_capacity(n);
    for _ in 0..n {
        let slide_idx = r.u32()?;
        let stain_idx = r.u32()?;
        let stack = r.u32()?;
        let x = r.f64()?;
        let y = r.f64()?;
        let mut feature = Vec::with_capacity(d);
        for _ in 0..d {
            feature.push(r.f64()?);
        }
        nodes.push(PatchRecord {
            patient_id: patient_id.clone(),
            slide_id: slides
                .get(slide_idx)
                .ok_or_else(|| Error::Format(format!("{}: bad slide index", path.display())))?
                .clone(),
            stain: stains
                .get(stain_idx)
                .ok_or_else(|| Error::Format(format!("{}: bad stain index", path.display())))?
                .clone(),
            stack_index: stack as u32,
            x,
            y,
            feature,
        });
    }
    let n_edges = r.u32()?;
    let mut edges = Vec::with_capacity(n_edges);
    for _ in 0..n_edges {
        let u = r.u32()?;
        let v = r.u32()?;
        let kind = match r.take(1)?[0] {
            0 => EdgeType::Fs,
            1 => EdgeType::Ra,
            2 => EdgeType::Both,
            other => {
                return Err(Error::Format(format!(
                    "{}: bad edge kind {other}",
                    path.display()
                )))
            }
        };
        if u >= n || v >= n {
            return Err(Error::Format(format!(
                "{}: edge endpoint out of range",
                path.display()
            )));
        }
        edges.push(Edge { u, v, kind });
    }
    let mut original_ids = Vec::with_capacity(n);
    for _ in 0..n {
        original_ids.push(r.u32()?);
    }
    if r.off != bytes.len() {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    Ok(PatientGraph {
        patient_id,
        nodes,
        edges,
        original_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_patient_graph;

    #[test]
    fn graph_roundtrip() {
        let recs: Vec<PatchRecord> = (0..8)
            .map(|i| PatchRecord {
                patient_id: "p7".into(),
                slide_id: format!("s{}", i % 2),
                stain: if i % 2 == 0 {
                    "HE".into()
                } else {
                    "CD3".into()
                },
                stack_index: (i % 2) as u32,
                x: (i / 2) as f64,
                y: (i % 2) as f64 * 3.5,
                feature: vec![i as f64 * 0.25, -(i as f64)],
            })
            .collect();
        let g = build_patient_graph(&recs, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.bxg");
        write_patient_graph(&path, &g).unwrap();
        let back = read_patient_graph(&path).unwrap();
        assert_eq!(back.patient_id, g.patient_id);
        assert_eq!(back.nodes, g.nodes);
        assert_eq!(back.edges, g.edges);
        assert_eq!(back.original_ids, g.original_ids);
    }

    #[test]
    fn rejects_foreign_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bxg");
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(read_patient_graph(&path), Err(Error::Format(_))));
    }
}
