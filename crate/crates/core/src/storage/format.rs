//! Byte layout of `tree.bin`.
//!
//! ```text
//! [header, padded to a page]
//! [node records, each starting on a page boundary]
//! [locator: sorted (u64 vector id, u64 leaf, u32 slot), page aligned]
//! [directory entries][trailer], page aligned
//! ```
//!
//! The header checksum covers the header fields before it, the directory and
//! the trailer. All integers are little-endian.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use twox_hash::XxHash64;

use crate::edges::{EdgeParams, SkipEdgeGraph};
use crate::error::{Error, Result};
use crate::metric::{norm, Metric};
use crate::scalar::Scalar;
use crate::tree::{BPlusAnnTree, BuildParams, NodeBody, NodeId, NodeKind, TreeNode};

pub const MAGIC: &[u8; 4] = b"BPAN";
pub const VERSION: u32 = 1;
pub const DEFAULT_PAGE_SIZE: usize = 4096;

pub(crate) const HEADER_LEN: usize = 45;
const CHECKED_HEADER_LEN: usize = 37;
pub(crate) const DIR_ENTRY_LEN: usize = 27;
pub(crate) const TRAILER_LEN: usize = 78;
pub(crate) const LOCATOR_ENTRY_LEN: usize = 20;
const RECORD_HEAD_LEN: usize = 16;
const FLAG_EDGES: u8 = 1;

pub(crate) fn align_up(v: u64, page: u64) -> u64 {
    v.div_ceil(page) * page
}

pub(crate) fn checksum(parts: &[&[u8]]) -> u64 {
    use std::hash::Hasher;
    let mut h = XxHash64::with_seed(0);
    for p in parts {
        h.write(p);
    }
    h.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirEntry {
    pub node_id: NodeId,
    pub offset: u64,
    pub length: u64,
    pub kind: NodeKind,
    pub level: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Header {
    pub dim: usize,
    pub metric: Metric,
    pub node_count: u64,
    pub root: NodeId,
    pub directory_offset: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Trailer {
    pub page_size: u64,
    pub kappa_leaf: u64,
    pub kappa_inner: u64,
    pub seed: u64,
    pub scalar_tag: u8,
    pub has_edges: bool,
    pub vector_count: u64,
    pub locator_offset: u64,
    pub locator_len: u64,
    pub locator_checksum: u64,
    pub d_edge: u64,
    pub s_leaf: u64,
}

/// Everything but the node records.
#[derive(Debug, Clone)]
pub struct FileLayout {
    pub path: PathBuf,
    pub page_size: usize,
    pub dim: usize,
    pub metric: Metric,
    pub root: NodeId,
    pub vector_count: u64,
    pub has_edges: bool,
    /// In payload order.
    pub directory: Vec<DirEntry>,
    pub(crate) header: Header,
    pub(crate) trailer: Trailer,
}

impl FileLayout {
    pub fn build_params(&self) -> BuildParams {
        BuildParams {
            kappa_leaf: self.trailer.kappa_leaf as usize,
            kappa_inner: self.trailer.kappa_inner as usize,
            metric: self.metric,
            seed: self.trailer.seed,
        }
    }

    pub fn edge_params(&self) -> Option<EdgeParams> {
        self.has_edges.then_some(EdgeParams {
            d_edge: self.trailer.d_edge as usize,
            s_leaf: self.trailer.s_leaf as usize,
        })
    }

    pub fn entry(&self, id: NodeId) -> Option<&DirEntry> {
        self.directory.iter().find(|e| e.node_id == id)
    }

    /// True when every record starts on a page boundary.
    pub fn offsets_aligned(&self) -> bool {
        self.directory.iter().all(|e| e.offset % self.page_size as u64 == 0)
    }

    /// Fraction of inner nodes whose children occupy consecutive record slots
    /// in payload order.
    pub fn sibling_locality(&self, children: &HashMap<NodeId, Vec<NodeId>>) -> f64 {
        let mut sorted: Vec<&DirEntry> = self.directory.iter().collect();
        sorted.sort_by_key(|e| e.offset);
        let rank: HashMap<NodeId, usize> = sorted.iter().enumerate().map(|(i, e)| (e.node_id, i)).collect();
        let parents: Vec<&Vec<NodeId>> = children.values().filter(|c| !c.is_empty()).collect();
        if parents.is_empty() {
            return 1.0;
        }
        let good = parents
            .iter()
            .filter(|kids| {
                let mut r: Vec<usize> = kids.iter().filter_map(|k| rank.get(k).copied()).collect();
                r.sort_unstable();
                r.len() == kids.len() && r.windows(2).all(|w| w[1] == w[0] + 1)
            })
            .count();
        good as f64 / parents.len() as f64
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn scalars<S: Scalar>(&mut self, v: &[S]) {
        for x in v {
            x.write_le(&mut self.buf);
        }
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader { bytes, at: 0, what }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::integrity(format!("{} truncated at byte {}", self.what, self.at)))?;
        self.at += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn scalars<S: Scalar>(&mut self, n: usize) -> Result<Vec<S>> {
        let raw = self.take(n * S::BYTES)?;
        Ok(raw.chunks_exact(S::BYTES).map(S::read_le).collect())
    }
    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

/// A decoded record: the node and, for leaves of indexes with edges, each
/// slot's out-edges.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord<S> {
    pub node: TreeNode<S>,
    pub edges: Option<Vec<Vec<u64>>>,
}

pub(crate) fn encode_record<S: Scalar>(node: &TreeNode<S>, edges: Option<&[Vec<u64>]>) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.u64(node.id);
    w.u8(node.kind().code());
    w.u8(if edges.is_some() && node.is_leaf() {
        FLAG_EDGES
    } else {
        0
    });
    w.u16(node.level);
    w.u32(node.len() as u32);
    debug_assert_eq!(w.buf.len(), RECORD_HEAD_LEN);
    w.scalars(&node.centroid);
    match &node.body {
        NodeBody::Leaf { ids, vectors, .. } => {
            for &id in ids {
                w.u64(id);
            }
            w.scalars(vectors);
            if let Some(edges) = edges {
                for e in edges {
                    w.u32(e.len() as u32);
                    for &n in e {
                        w.u64(n);
                    }
                }
            }
        }
        NodeBody::Inner {
            children,
            counts,
            centroids,
            ..
        } => {
            for &c in children {
                w.u64(c);
            }
            for &c in counts {
                w.u64(c);
            }
            w.scalars(centroids);
        }
    }
    w.buf
}

pub(crate) fn decode_record<S: Scalar>(bytes: &[u8], dim: usize, expect: &DirEntry) -> Result<NodeRecord<S>> {
    let mut r = Reader::new(bytes, "node record");
    let id = r.u64()?;
    let kind = NodeKind::from_code(r.u8()?).ok_or_else(|| Error::integrity("bad node kind"))?;
    let flags = r.u8()?;
    let level = r.u16()?;
    let n = r.u32()? as usize;
    if id != expect.node_id || kind != expect.kind || level != expect.level {
        return Err(Error::integrity(format!(
            "record at offset {} does not match directory entry for node {}",
            expect.offset, expect.node_id
        )));
    }
    let centroid = r.scalars::<S>(dim)?;
    let (body, edges) = match kind {
        NodeKind::Leaf => {
            let ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let vectors = r.scalars::<S>(n * dim)?;
            let norms = vectors.chunks_exact(dim).map(norm).collect();
            let edges = if flags & FLAG_EDGES != 0 {
                let mut all = Vec::with_capacity(n);
                for _ in 0..n {
                    let c = r.u32()? as usize;
                    all.push((0..c).map(|_| r.u64()).collect::<Result<Vec<_>>>()?);
                }
                Some(all)
            } else {
                None
            };
            (NodeBody::Leaf { ids, vectors, norms }, edges)
        }
        NodeKind::Inner => {
            let children = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let counts = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let centroids = r.scalars::<S>(n * dim)?;
            let norms = centroids.chunks_exact(dim).map(norm).collect();
            (
                NodeBody::Inner {
                    children,
                    counts,
                    centroids,
                    norms,
                },
                None,
            )
        }
    };
    if !r.done() {
        return Err(Error::integrity(format!("trailing bytes in record of node {id}")));
    }
    Ok(NodeRecord {
        node: TreeNode {
            id,
            level,
            centroid,
            body,
        },
        edges,
    })
}

pub(crate) fn encode_header(h: &Header, trailer_and_dir: &[&[u8]]) -> Vec<u8> {
    let mut w = Writer {
        buf: Vec::with_capacity(HEADER_LEN),
    };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(h.dim as u32);
    w.u8(h.metric.code());
    w.u64(h.node_count);
    w.u64(h.root);
    w.u64(h.directory_offset);
    let mut parts: Vec<&[u8]> = vec![&w.buf[..CHECKED_HEADER_LEN]];
    parts.extend_from_slice(trailer_and_dir);
    let sum = checksum(&parts);
    w.u64(sum);
    w.buf
}

pub(crate) fn encode_directory(dir: &[DirEntry]) -> Vec<u8> {
    let mut w = Writer {
        buf: Vec::with_capacity(dir.len() * DIR_ENTRY_LEN),
    };
    for e in dir {
        w.u64(e.node_id);
        w.u64(e.offset);
        w.u64(e.length);
        w.u8(e.kind.code());
        w.u16(e.level);
    }
    w.buf
}

pub(crate) fn encode_trailer(t: &Trailer) -> Vec<u8> {
    let mut w = Writer {
        buf: Vec::with_capacity(TRAILER_LEN),
    };
    w.u32(t.page_size as u32);
    w.u64(t.kappa_leaf);
    w.u64(t.kappa_inner);
    w.u64(t.seed);
    w.u8(t.scalar_tag);
    w.u8(t.has_edges as u8);
    w.u64(t.vector_count);
    w.u64(t.locator_offset);
    w.u64(t.locator_len);
    w.u64(t.locator_checksum);
    w.u64(t.d_edge);
    w.u64(t.s_leaf);
    w.buf
}

pub(crate) fn encode_locator(entries: &mut [(u64, NodeId, u32)]) -> Vec<u8> {
    entries.sort_unstable_by_key(|e| e.0);
    let mut w = Writer {
        buf: Vec::with_capacity(entries.len() * LOCATOR_ENTRY_LEN),
    };
    for &(id, leaf, slot) in entries.iter() {
        w.u64(id);
        w.u64(leaf);
        w.u32(slot);
    }
    w.buf
}

pub(crate) fn decode_locator(bytes: &[u8]) -> Result<HashMap<u64, (NodeId, u32)>> {
    if !bytes.len().is_multiple_of(LOCATOR_ENTRY_LEN) {
        return Err(Error::integrity("locator section has a partial entry"));
    }
    let mut r = Reader::new(bytes, "locator");
    let mut out = HashMap::with_capacity(bytes.len() / LOCATOR_ENTRY_LEN);
    while !r.done() {
        let id = r.u64()?;
        let leaf = r.u64()?;
        let slot = r.u32()?;
        out.insert(id, (leaf, slot));
    }
    Ok(out)
}

pub(crate) fn read_at(file: &File, path: &Path, offset: u64, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    file.read_exact_at(&mut buf, offset).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::integrity(format!("{} truncated at offset {offset}", path.display()))
        } else {
            Error::storage(path, offset, e)
        }
    })?;
    Ok(buf)
}

pub(crate) fn write_at(file: &File, path: &Path, offset: u64, bytes: &[u8]) -> Result<()> {
    file.write_all_at(bytes, offset)
        .map_err(|e| Error::storage(path, offset, e))
}

/// Reads and checks the header, directory and trailer.
pub fn read_layout(path: impl AsRef<Path>) -> Result<FileLayout> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::storage(path, 0, e))?;
    read_layout_from(&file, path)
}

pub(crate) fn read_layout_from(file: &File, path: &Path) -> Result<FileLayout> {
    let file_len = file.metadata().map_err(|e| Error::storage(path, 0, e))?.len();
    if file_len >= 4 {
        let magic = read_at(file, path, 0, 4)?;
        if magic != MAGIC {
            return Err(Error::format(format!(
                "{} is not an index file (bad magic)",
                path.display()
            )));
        }
    }
    let raw = read_at(file, path, 0, HEADER_LEN)?;
    let mut r = Reader::new(&raw, "header");
    r.take(4)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported format version {version}")));
    }
    let dim = r.u32()? as usize;
    let metric = Metric::from_code(r.u8()?).ok_or_else(|| Error::format("unknown metric code"))?;
    let node_count = r.u64()?;
    let root = r.u64()?;
    let directory_offset = r.u64()?;
    let stored_sum = r.u64()?;

    let dir_len = node_count
        .checked_mul(DIR_ENTRY_LEN as u64)
        .ok_or_else(|| Error::integrity("node count overflows"))?;
    if directory_offset
        .checked_add(dir_len + TRAILER_LEN as u64)
        .is_none_or(|end| end > file_len)
    {
        return Err(Error::integrity(format!("{} is truncated", path.display())));
    }
    let dir_raw = read_at(file, path, directory_offset, dir_len as usize)?;
    let trailer_raw = read_at(file, path, directory_offset + dir_len, TRAILER_LEN)?;
    if checksum(&[&raw[..CHECKED_HEADER_LEN], &dir_raw, &trailer_raw]) != stored_sum {
        return Err(Error::integrity("header checksum mismatch"));
    }
    let mut r = Reader::new(&trailer_raw, "trailer");
    let trailer = Trailer {
        page_size: r.u32()? as u64,
        kappa_leaf: r.u64()?,
        kappa_inner: r.u64()?,
        seed: r.u64()?,
        scalar_tag: r.u8()?,
        has_edges: r.u8()? != 0,
        vector_count: r.u64()?,
        locator_offset: r.u64()?,
        locator_len: r.u64()?,
        locator_checksum: r.u64()?,
        d_edge: r.u64()?,
        s_leaf: r.u64()?,
    };
    let mut r = Reader::new(&dir_raw, "directory");
    let mut directory = Vec::with_capacity(node_count as usize);
    for _ in 0..node_count {
        let e = DirEntry {
            node_id: r.u64()?,
            offset: r.u64()?,
            length: r.u64()?,
            kind: NodeKind::from_code(r.u8()?).ok_or_else(|| Error::integrity("bad node kind in directory"))?,
            level: r.u16()?,
        };
        if e.offset.checked_add(e.length).is_none_or(|end| end > file_len) {
            return Err(Error::integrity(format!(
                "record of node {} lies past end of file",
                e.node_id
            )));
        }
        directory.push(e);
    }
    let header = Header {
        dim,
        metric,
        node_count,
        root,
        directory_offset,
    };
    Ok(FileLayout {
        path: path.to_path_buf(),
        page_size: trailer.page_size as usize,
        dim,
        metric,
        root,
        vector_count: trailer.vector_count,
        has_edges: trailer.has_edges,
        directory,
        header,
        trailer,
    })
}

pub(crate) fn check_scalar<S: Scalar>(layout: &FileLayout) -> Result<()> {
    if layout.trailer.scalar_tag != S::TAG {
        return Err(Error::format(format!(
            "index stores {}-byte elements; opened as {}-byte",
            if layout.trailer.scalar_tag == 1 { 4 } else { 8 },
            S::BYTES
        )));
    }
    Ok(())
}

/// Parents first; the children of each node are written back to back.
fn payload_order<S: Scalar>(tree: &BPlusAnnTree<S>) -> Vec<NodeId> {
    let mut order = vec![tree.root()];
    let mut stack = vec![tree.root()];
    // Depth first over nodes, emitting each node's whole child block when the
    // node is reached.
    while let Some(id) = stack.pop() {
        let kids = tree.node(id).unwrap().children();
        order.extend_from_slice(kids);
        stack.extend(kids.iter().rev());
    }
    order
}

pub fn check_page_size(page_size: usize) -> Result<()> {
    if !page_size.is_power_of_two() || page_size < 64 {
        return Err(Error::usage(format!(
            "page size {page_size} must be a power of two of at least 64"
        )));
    }
    Ok(())
}

/// Writes tail sections (locator, directory, trailer) at `at`, then the
/// header, then syncs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn write_tail(
    file: &File,
    path: &Path,
    at: u64,
    page: u64,
    mut header: Header,
    mut trailer: Trailer,
    directory: &[DirEntry],
    mut locator: Vec<(u64, NodeId, u32)>,
) -> Result<u64> {
    let loc_bytes = encode_locator(&mut locator);
    trailer.locator_offset = align_up(at, page);
    trailer.locator_len = loc_bytes.len() as u64;
    trailer.locator_checksum = checksum(&[&loc_bytes]);
    trailer.vector_count = locator.len() as u64;
    write_at(file, path, trailer.locator_offset, &loc_bytes)?;
    header.directory_offset = align_up(trailer.locator_offset + trailer.locator_len, page);
    header.node_count = directory.len() as u64;
    let dir_bytes = encode_directory(directory);
    let trailer_bytes = encode_trailer(&trailer);
    let mut tail = dir_bytes.clone();
    tail.extend_from_slice(&trailer_bytes);
    write_at(file, path, header.directory_offset, &tail)?;
    let end = header.directory_offset + tail.len() as u64;
    file.set_len(end).map_err(|e| Error::storage(path, end, e))?;
    let head = encode_header(&header, &[&dir_bytes, &trailer_bytes]);
    write_at(file, path, 0, &head)?;
    file.sync_all().map_err(|e| Error::storage(path, 0, e))?;
    Ok(end)
}

/// Writes the index (and its skip edges, if given) to `path`.
pub fn serialize<S: Scalar>(
    tree: &BPlusAnnTree<S>,
    edges: Option<&SkipEdgeGraph>,
    path: impl AsRef<Path>,
    page_size: usize,
) -> Result<FileLayout> {
    let path = path.as_ref();
    check_page_size(page_size)?;
    tree.verify()
        .map_err(|v| Error::integrity(format!("refusing to write an inconsistent tree: {v}")))?;
    let page = page_size as u64;
    let mut file = std::fs::OpenOptions::new()
        .read(true)
        .write(true)
        .create(true)
        .truncate(true)
        .open(path)
        .map_err(|e| Error::storage(path, 0, e))?;
    file.write_all(&vec![0u8; page_size])
        .map_err(|e| Error::storage(path, 0, e))?;

    let mut offset = page;
    let mut directory = Vec::with_capacity(tree.nodes().len());
    for id in payload_order(tree) {
        let node = tree.node(id).unwrap();
        let node_edges: Option<Vec<Vec<u64>>> = match (edges, node.is_leaf()) {
            (Some(g), true) => Some(node.leaf_ids().iter().map(|&v| g.neighbors(v).to_vec()).collect()),
            _ => None,
        };
        let bytes = encode_record(node, node_edges.as_deref());
        write_at(&file, path, offset, &bytes)?;
        directory.push(DirEntry {
            node_id: id,
            offset,
            length: bytes.len() as u64,
            kind: node.kind(),
            level: node.level,
        });
        offset = align_up(offset + bytes.len() as u64, page);
    }
    let locator: Vec<(u64, NodeId, u32)> = tree
        .nodes()
        .iter()
        .filter(|n| n.is_leaf())
        .flat_map(|n| n.leaf_ids().iter().enumerate().map(move |(s, &v)| (v, n.id, s as u32)))
        .collect();
    let params = tree.params();
    let header = Header {
        dim: tree.dim(),
        metric: tree.metric(),
        node_count: 0,
        root: tree.root(),
        directory_offset: 0,
    };
    let trailer = Trailer {
        page_size: page,
        kappa_leaf: params.kappa_leaf as u64,
        kappa_inner: params.kappa_inner as u64,
        seed: params.seed,
        scalar_tag: S::TAG,
        has_edges: edges.is_some(),
        vector_count: 0,
        locator_offset: 0,
        locator_len: 0,
        locator_checksum: 0,
        d_edge: edges.map_or(0, |g| g.params.d_edge as u64),
        s_leaf: edges.map_or(0, |g| g.params.s_leaf as u64),
    };
    write_tail(&file, path, offset, page, header, trailer, &directory, locator)?;
    read_layout_from(&file, path)
}

pub(crate) fn read_locator(file: &File, layout: &FileLayout) -> Result<HashMap<u64, (NodeId, u32)>> {
    let t = &layout.trailer;
    let bytes = read_at(file, &layout.path, t.locator_offset, t.locator_len as usize)?;
    if checksum(&[&bytes]) != t.locator_checksum {
        return Err(Error::integrity("locator checksum mismatch"));
    }
    decode_locator(&bytes)
}

/// Loads a whole index file into memory.
pub fn deserialize<S: Scalar>(path: impl AsRef<Path>) -> Result<BPlusAnnTree<S>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::storage(path, 0, e))?;
    let layout = read_layout_from(&file, path)?;
    check_scalar::<S>(&layout)?;
    let mut slots: Vec<Option<TreeNode<S>>> = vec![None; layout.directory.len()];
    let mut adjacency = HashMap::new();
    for e in &layout.directory {
        let bytes = read_at(&file, path, e.offset, e.length as usize)?;
        let rec = decode_record::<S>(&bytes, layout.dim, e)?;
        if let Some(edges) = rec.edges {
            for (&v, list) in rec.node.leaf_ids().iter().zip(edges) {
                adjacency.insert(v, list);
            }
        }
        let slot = slots
            .get_mut(e.node_id as usize)
            .ok_or_else(|| Error::integrity(format!("node id {} out of range", e.node_id)))?;
        *slot = Some(rec.node);
    }
    let nodes = slots
        .into_iter()
        .enumerate()
        .map(|(i, n)| n.ok_or_else(|| Error::integrity(format!("node {i} missing from directory"))))
        .collect::<Result<Vec<_>>>()?;
    let mut tree = BPlusAnnTree::from_nodes(layout.dim, layout.build_params(), nodes, layout.root)?;
    if let Some(params) = layout.edge_params() {
        tree.set_graph(SkipEdgeGraph {
            adjacency,
            built_over: tree.version(),
            params,
            distance_evals: 0,
        });
    }
    Ok(tree)
}
