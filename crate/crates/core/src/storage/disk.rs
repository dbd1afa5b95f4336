//! Disk-resident index: nodes are faulted into a byte-capped LRU cache on
//! first touch and pinned while in use.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions as FsOpenOptions};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::format::{
    align_up, check_scalar, decode_record, encode_record, read_at, read_layout_from, read_locator, write_at,
    write_tail, DirEntry, FileLayout, NodeRecord,
};
use crate::error::{Error, Result};
use crate::metric::Metric;
use crate::scalar::Scalar;
use crate::search::SearchStats;
use crate::source::NodeSource;
use crate::tree::{insert_vector, BuildParams, InsertReport, NodeId, NodeStoreMut, TreeNode};

/// Directory offset of a node created by an insert and not yet written.
const UNWRITTEN: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenOptions {
    /// Cache cap in bytes of node records; `u64::MAX` for no cap.
    pub cache_capacity_bytes: u64,
    /// Levels loaded at open, counting from the root (0 loads nothing).
    pub preload_levels: u16,
}

impl Default for OpenOptions {
    fn default() -> Self {
        OpenOptions {
            cache_capacity_bytes: u64::MAX,
            preload_levels: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoStats {
    pub disk_reads: u64,
    pub cache_hits: u64,
    pub bytes_used: u64,
    pub evictions: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionReport {
    /// Evicted node ids, least recently used first.
    pub evicted: Vec<NodeId>,
    pub flushed: usize,
    pub bytes_used: u64,
}

struct Resident<S> {
    record: Arc<NodeRecord<S>>,
    bytes: u64,
    stamp: u64,
    pins: u32,
    dirty: bool,
}

struct Cache<S> {
    entries: HashMap<NodeId, Resident<S>>,
    recency: BTreeMap<u64, NodeId>,
    clock: u64,
    bytes_used: u64,
}

impl<S> Cache<S> {
    fn touch(&mut self, id: NodeId) {
        let e = self.entries.get_mut(&id).unwrap();
        self.recency.remove(&e.stamp);
        self.clock += 1;
        e.stamp = self.clock;
        self.recency.insert(self.clock, id);
    }

    fn put(&mut self, id: NodeId, record: Arc<NodeRecord<S>>, bytes: u64, dirty: bool) {
        if let Some(old) = self.entries.remove(&id) {
            self.recency.remove(&old.stamp);
            self.bytes_used -= old.bytes;
        }
        self.clock += 1;
        self.entries.insert(
            id,
            Resident {
                record,
                bytes,
                stamp: self.clock,
                pins: 0,
                dirty,
            },
        );
        self.recency.insert(self.clock, id);
        self.bytes_used += bytes;
    }
}

/// Where records live and how big they are. Changes only under the writer lock.
struct Shape {
    root: NodeId,
    directory: HashMap<NodeId, DirEntry>,
    /// Directory in payload order, for stable rewrites.
    order: Vec<NodeId>,
    end: u64,
    layout: FileLayout,
}

pub struct DiskIndex<S: Scalar> {
    path: PathBuf,
    file: File,
    dim: usize,
    metric: Metric,
    params: BuildParams,
    page: u64,
    shape: RwLock<Shape>,
    cache: Mutex<Cache<S>>,
    capacity: AtomicU64,
    locator: RwLock<Option<HashMap<u64, (NodeId, u32)>>>,
    leaf_parents: RwLock<Option<HashMap<NodeId, NodeId>>>,
    mutations: Mutex<HashMap<NodeId, u32>>,
    writer: Mutex<()>,
    disk_reads: AtomicU64,
    cache_hits: AtomicU64,
    evictions: AtomicU64,
}

/// A pinned resident node; the pin is released on drop.
pub struct NodeGuard<'a, S: Scalar> {
    index: &'a DiskIndex<S>,
    id: NodeId,
    record: Arc<NodeRecord<S>>,
}

impl<S: Scalar> NodeGuard<'_, S> {
    pub fn node(&self) -> &TreeNode<S> {
        &self.record.node
    }

    pub fn edges(&self) -> Option<&[Vec<u64>]> {
        self.record.edges.as_deref()
    }
}

impl<S: Scalar> Drop for NodeGuard<'_, S> {
    fn drop(&mut self) {
        let mut cache = self.index.cache.lock();
        if let Some(e) = cache.entries.get_mut(&self.id) {
            e.pins = e.pins.saturating_sub(1);
        }
    }
}

impl<S: Scalar> std::fmt::Debug for DiskIndex<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiskIndex")
            .field("path", &self.path)
            .field("dim", &self.dim)
            .field("metric", &self.metric)
            .finish()
    }
}

/// Opens an index file; only the top `preload_levels` levels are read now.
pub fn open_index<S: Scalar>(path: impl AsRef<Path>, options: OpenOptions) -> Result<DiskIndex<S>> {
    let path = path.as_ref().to_path_buf();
    let file = FsOpenOptions::new()
        .read(true)
        .write(true)
        .open(&path)
        .map_err(|e| Error::storage(&path, 0, e))?;
    let layout = read_layout_from(&file, &path)?;
    check_scalar::<S>(&layout)?;
    if layout.page_size == 0 || !layout.page_size.is_power_of_two() {
        return Err(Error::format(format!("bad page size {}", layout.page_size)));
    }
    let directory: HashMap<NodeId, DirEntry> = layout.directory.iter().map(|e| (e.node_id, *e)).collect();
    if !directory.contains_key(&layout.root) {
        return Err(Error::integrity(format!("root {} missing from directory", layout.root)));
    }
    let end = file.metadata().map_err(|e| Error::storage(&path, 0, e))?.len();
    let index = DiskIndex {
        dim: layout.dim,
        metric: layout.metric,
        params: layout.build_params(),
        page: layout.page_size as u64,
        shape: RwLock::new(Shape {
            root: layout.root,
            order: layout.directory.iter().map(|e| e.node_id).collect(),
            directory,
            end,
            layout,
        }),
        path,
        file,
        cache: Mutex::new(Cache {
            entries: HashMap::new(),
            recency: BTreeMap::new(),
            clock: 0,
            bytes_used: 0,
        }),
        capacity: AtomicU64::new(options.cache_capacity_bytes),
        locator: RwLock::new(None),
        leaf_parents: RwLock::new(None),
        mutations: Mutex::new(HashMap::new()),
        writer: Mutex::new(()),
        disk_reads: AtomicU64::new(0),
        cache_hits: AtomicU64::new(0),
        evictions: AtomicU64::new(0),
    };
    index.preload(options.preload_levels)?;
    Ok(index)
}

impl<S: Scalar> DiskIndex<S> {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn params(&self) -> BuildParams {
        self.params
    }

    pub fn root(&self) -> NodeId {
        self.shape.read().root
    }

    pub fn has_edges(&self) -> bool {
        self.shape.read().layout.has_edges
    }

    pub fn node_count(&self) -> usize {
        self.shape.read().directory.len()
    }

    pub fn len(&self) -> usize {
        if let Some(loc) = self.locator.read().as_ref() {
            return loc.len();
        }
        self.shape.read().layout.vector_count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Header, directory and trailer as last written.
    pub fn layout(&self) -> FileLayout {
        self.shape.read().layout.clone()
    }

    pub fn capacity(&self) -> u64 {
        self.capacity.load(Ordering::Relaxed)
    }

    pub fn set_capacity(&self, bytes: u64) {
        self.capacity.store(bytes, Ordering::Relaxed);
    }

    pub fn io_stats(&self) -> IoStats {
        IoStats {
            disk_reads: self.disk_reads.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            bytes_used: self.cache.lock().bytes_used,
            evictions: self.evictions.load(Ordering::Relaxed),
        }
    }

    pub fn resident_nodes(&self) -> Vec<NodeId> {
        let cache = self.cache.lock();
        cache.recency.values().copied().collect()
    }

    fn preload(&self, levels: u16) -> Result<()> {
        if levels == 0 {
            return Ok(());
        }
        let entries: Vec<DirEntry> = {
            let shape = self.shape.read();
            let root_level = shape.directory[&shape.root].level;
            shape
                .order
                .iter()
                .map(|id| shape.directory[id])
                .filter(|e| e.level + levels > root_level)
                .collect()
        };
        for e in entries {
            let record = self.read_record(&e)?;
            let mut cache = self.cache.lock();
            if !cache.entries.contains_key(&e.node_id) {
                cache.put(e.node_id, Arc::new(record), e.length, false);
            }
        }
        Ok(())
    }

    fn entry(&self, id: NodeId) -> Result<DirEntry> {
        self.shape
            .read()
            .directory
            .get(&id)
            .copied()
            .ok_or_else(|| Error::integrity(format!("node {id} is not in the directory")))
    }

    fn read_record(&self, e: &DirEntry) -> Result<NodeRecord<S>> {
        let bytes = read_at(&self.file, &self.path, e.offset, e.length as usize)?;
        decode_record(&bytes, self.dim, e)
    }

    /// Returns node `id` pinned in the cache, reading it on a miss.
    pub fn fetch_node(&self, id: NodeId) -> Result<NodeGuard<'_, S>> {
        let mut stats = SearchStats::default();
        self.fetch_counted(id, &mut stats)
    }

    fn fetch_counted(&self, id: NodeId, stats: &mut SearchStats) -> Result<NodeGuard<'_, S>> {
        {
            let mut cache = self.cache.lock();
            if cache.entries.contains_key(&id) {
                cache.touch(id);
                let e = cache.entries.get_mut(&id).unwrap();
                e.pins += 1;
                self.cache_hits.fetch_add(1, Ordering::Relaxed);
                stats.cache_hits += 1;
                return Ok(NodeGuard {
                    index: self,
                    id,
                    record: e.record.clone(),
                });
            }
        }
        let entry = self.entry(id)?;
        let record = Arc::new(self.read_record(&entry)?);
        self.disk_reads.fetch_add(1, Ordering::Relaxed);
        stats.disk_reads += 1;
        let mut cache = self.cache.lock();
        if !cache.entries.contains_key(&id) {
            cache.put(id, record, entry.length, false);
        } else {
            cache.touch(id);
        }
        let e = cache.entries.get_mut(&id).unwrap();
        e.pins += 1;
        Ok(NodeGuard {
            index: self,
            id,
            record: e.record.clone(),
        })
    }

    /// Evicts least recently used unpinned nodes until the cache fits its
    /// cap, writing dirty ones back first.
    pub fn lru_maintain(&self) -> Result<EvictionReport> {
        let cap = self.capacity();
        let mut report = EvictionReport::default();
        let mut cache = self.cache.lock();
        if cache.bytes_used <= cap {
            report.bytes_used = cache.bytes_used;
            return Ok(report);
        }
        let order: Vec<(u64, NodeId)> = cache.recency.iter().map(|(&s, &id)| (s, id)).collect();
        for (stamp, id) in order {
            if cache.bytes_used <= cap {
                break;
            }
            let e = &cache.entries[&id];
            if e.pins > 0 {
                continue;
            }
            if e.dirty {
                let record = e.record.clone();
                self.write_back(id, &record)?;
                report.flushed += 1;
            }
            let e = cache.entries.remove(&id).unwrap();
            cache.recency.remove(&stamp);
            cache.bytes_used -= e.bytes;
            report.evicted.push(id);
        }
        self.evictions.fetch_add(report.evicted.len() as u64, Ordering::Relaxed);
        report.bytes_used = cache.bytes_used;
        Ok(report)
    }

    /// Writes a record in place if it fits its pages, else at the end of the file.
    fn write_back(&self, id: NodeId, record: &NodeRecord<S>) -> Result<()> {
        let bytes = encode_record(&record.node, record.edges.as_deref());
        let mut shape = self.shape.write();
        let page = self.page;
        let old = shape.directory.get(&id).copied().filter(|e| e.offset != UNWRITTEN);
        let offset = match old {
            Some(e) if align_up(bytes.len() as u64, page) <= align_up(e.length.max(1), page) => e.offset,
            _ => {
                let at = align_up(shape.end, page);
                shape.end = at + bytes.len() as u64;
                at
            }
        };
        write_at(&self.file, &self.path, offset, &bytes)?;
        let entry = DirEntry {
            node_id: id,
            offset,
            length: bytes.len() as u64,
            kind: record.node.kind(),
            level: record.node.level,
        };
        if old.is_none() && !shape.order.contains(&id) {
            shape.order.push(id);
        }
        shape.directory.insert(id, entry);
        Ok(())
    }

    fn locator_snapshot<R>(&self, f: impl FnOnce(&HashMap<u64, (NodeId, u32)>) -> R) -> Result<R> {
        if let Some(loc) = self.locator.read().as_ref() {
            return Ok(f(loc));
        }
        let loaded = {
            let shape = self.shape.read();
            read_locator(&self.file, &shape.layout)?
        };
        let mut slot = self.locator.write();
        let loc = slot.get_or_insert(loaded);
        Ok(f(loc))
    }

    fn parents_snapshot<R>(&self, f: impl FnOnce(&HashMap<NodeId, NodeId>) -> R) -> Result<R> {
        if let Some(p) = self.leaf_parents.read().as_ref() {
            return Ok(f(p));
        }
        let level_one: Vec<NodeId> = {
            let shape = self.shape.read();
            shape
                .order
                .iter()
                .filter(|id| shape.directory[id].level == 1)
                .copied()
                .collect()
        };
        let mut map = HashMap::new();
        for id in level_one {
            let record = self.resident_or_read(id)?;
            for &c in record.node.children() {
                map.insert(c, id);
            }
        }
        let mut slot = self.leaf_parents.write();
        let p = slot.get_or_insert(map);
        Ok(f(p))
    }

    /// Current contents of a node without touching cache statistics.
    fn resident_or_read(&self, id: NodeId) -> Result<Arc<NodeRecord<S>>> {
        if let Some(e) = self.cache.lock().entries.get(&id) {
            return Ok(e.record.clone());
        }
        Ok(Arc::new(self.read_record(&self.entry(id)?)?))
    }

    /// Inserts one vector. Only the descent path and split products are
    /// touched; they stay dirty in the cache until evicted or flushed.
    pub fn insert(&self, v: &[S], id: u64) -> Result<InsertReport> {
        let _w = self.writer.lock();
        self.locator_snapshot(|_| ())?;
        let next_id = {
            let shape = self.shape.read();
            shape.directory.len() as u64
        };
        let mut txn = Txn {
            index: self,
            root: self.root(),
            staged: BTreeMap::new(),
            edges: HashMap::new(),
            next_id,
            relocations: Vec::new(),
            bumps: HashMap::new(),
        };
        let report = insert_vector(&mut txn, v, id)?;
        txn.commit();
        Ok(report)
    }

    /// Writes dirty nodes, the locator, directory, trailer and header, then
    /// syncs. The file is a complete index afterwards.
    pub fn flush(&self) -> Result<()> {
        let _w = self.writer.lock();
        let dirty: Vec<(NodeId, Arc<NodeRecord<S>>)> = {
            let cache = self.cache.lock();
            let mut d: Vec<_> = cache
                .entries
                .iter()
                .filter(|(_, e)| e.dirty)
                .map(|(&id, e)| (id, e.record.clone()))
                .collect();
            d.sort_by_key(|(id, _)| *id);
            d
        };
        for (id, record) in &dirty {
            self.write_back(*id, record)?;
        }
        {
            let mut cache = self.cache.lock();
            for (id, _) in &dirty {
                if let Some(e) = cache.entries.get_mut(id) {
                    e.dirty = false;
                }
            }
        }
        let locator: Vec<(u64, NodeId, u32)> =
            self.locator_snapshot(|l| l.iter().map(|(&v, &(leaf, slot))| (v, leaf, slot)).collect())?;
        let mut shape = self.shape.write();
        let directory: Vec<DirEntry> = shape.order.iter().map(|id| shape.directory[id]).collect();
        let mut header = shape.layout.header.clone();
        header.root = shape.root;
        let trailer = shape.layout.trailer.clone();
        let end = write_tail(
            &self.file, &self.path, shape.end, self.page, header, trailer, &directory, locator,
        )?;
        shape.end = end;
        shape.layout = read_layout_from(&self.file, &self.path)?;
        Ok(())
    }

    /// Starts a thread that runs [`DiskIndex::lru_maintain`] every `interval`.
    pub fn spawn_maintenance(self: &Arc<Self>, interval: Duration) -> MaintenanceTask {
        let stop = Arc::new(AtomicBool::new(false));
        let samples = Arc::new(Mutex::new(Vec::new()));
        let (index, flag, log) = (Arc::clone(self), Arc::clone(&stop), Arc::clone(&samples));
        let handle = std::thread::spawn(move || {
            // Runs at least one cycle, and a last one after the stop request.
            loop {
                let stopping = flag.load(Ordering::Relaxed);
                log.lock().push(index.lru_maintain()?.bytes_used);
                if stopping {
                    return Ok(());
                }
                std::thread::sleep(interval);
            }
        });
        MaintenanceTask {
            stop,
            samples,
            handle: Some(handle),
        }
    }
}

/// Background cache maintenance; stops when dropped or on [`MaintenanceTask::stop`].
pub struct MaintenanceTask {
    stop: Arc<AtomicBool>,
    samples: Arc<Mutex<Vec<u64>>>,
    handle: Option<JoinHandle<Result<()>>>,
}

impl MaintenanceTask {
    /// Cache occupancy after each completed cycle.
    pub fn samples(&self) -> Vec<u64> {
        self.samples.lock().clone()
    }

    pub fn stop(mut self) -> Result<Vec<u64>> {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            h.join().map_err(|_| Error::usage("maintenance thread panicked"))??;
        }
        Ok(self.samples())
    }
}

impl Drop for MaintenanceTask {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Staged copies of the nodes an insert touches, published together.
struct Txn<'a, S: Scalar> {
    index: &'a DiskIndex<S>,
    root: NodeId,
    staged: BTreeMap<NodeId, TreeNode<S>>,
    edges: HashMap<u64, Vec<u64>>,
    next_id: u64,
    relocations: Vec<(u64, NodeId, u32)>,
    bumps: HashMap<NodeId, u32>,
}

impl<S: Scalar> Txn<'_, S> {
    fn stage(&mut self, id: NodeId) -> Result<()> {
        if self.staged.contains_key(&id) {
            return Ok(());
        }
        let guard = self.index.fetch_node(id)?;
        if let Some(edges) = guard.edges() {
            for (&v, e) in guard.node().leaf_ids().iter().zip(edges) {
                self.edges.insert(v, e.clone());
            }
        }
        self.staged.insert(id, guard.node().clone());
        Ok(())
    }

    fn commit(self) {
        let index = self.index;
        let has_edges = index.has_edges();
        let mut cache = index.cache.lock();
        let mut shape = index.shape.write();
        for (id, node) in self.staged {
            let edges = (has_edges && node.is_leaf()).then(|| {
                node.leaf_ids()
                    .iter()
                    .map(|v| self.edges.get(v).cloned().unwrap_or_default())
                    .collect::<Vec<_>>()
            });
            let bytes = encode_record(&node, edges.as_deref()).len() as u64;
            let record = Arc::new(NodeRecord { node, edges });
            let pins = cache.entries.get(&id).map_or(0, |e| e.pins);
            cache.put(id, record, bytes, true);
            cache.entries.get_mut(&id).unwrap().pins = pins;
            // Placeholder until the node is first written.
            let n = &cache.entries[&id].record.node;
            shape.directory.entry(id).or_insert_with(|| DirEntry {
                node_id: id,
                offset: UNWRITTEN,
                length: 0,
                kind: n.kind(),
                level: n.level,
            });
        }
        shape.root = self.root;
        let mut muts = index.mutations.lock();
        for (id, n) in self.bumps {
            muts.insert(id, n);
        }
        let mut loc = index.locator.write();
        let loc = loc.as_mut().expect("locator loaded before insert");
        for (v, leaf, slot) in self.relocations {
            loc.insert(v, (leaf, slot));
        }
        *index.leaf_parents.write() = None;
    }
}

impl<S: Scalar> NodeStoreMut<S> for Txn<'_, S> {
    fn dim(&self) -> usize {
        self.index.dim
    }
    fn build_params(&self) -> BuildParams {
        self.index.params
    }
    fn root_id(&self) -> NodeId {
        self.root
    }
    fn set_root(&mut self, id: NodeId) {
        self.root = id;
    }
    fn node(&mut self, id: NodeId) -> Result<&TreeNode<S>> {
        self.stage(id)?;
        Ok(&self.staged[&id])
    }
    fn node_mut(&mut self, id: NodeId) -> Result<&mut TreeNode<S>> {
        self.stage(id)?;
        Ok(self.staged.get_mut(&id).unwrap())
    }
    fn alloc(&mut self, mut node: TreeNode<S>) -> NodeId {
        let id = self.next_id;
        self.next_id += 1;
        node.id = id;
        self.staged.insert(id, node);
        id
    }
    fn contains_vector(&mut self, id: u64) -> Result<bool> {
        if self.relocations.iter().any(|r| r.0 == id) {
            return Ok(true);
        }
        self.index.locator_snapshot(|l| l.contains_key(&id))
    }
    fn relocate(&mut self, vector: u64, leaf: NodeId, slot: u32) {
        self.relocations.push((vector, leaf, slot));
    }
    fn bump(&mut self, id: NodeId) -> u32 {
        let base = *self
            .bumps
            .entry(id)
            .or_insert_with(|| self.index.mutations.lock().get(&id).copied().unwrap_or(0));
        let n = base.wrapping_add(1);
        self.bumps.insert(id, n);
        n
    }
}

impl<S: Scalar> NodeSource<S> for DiskIndex<S> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn metric(&self) -> Metric {
        self.metric
    }

    fn root(&self) -> NodeId {
        DiskIndex::root(self)
    }

    fn vector_count(&self) -> usize {
        self.len()
    }

    fn has_edges(&self) -> bool {
        DiskIndex::has_edges(self)
    }

    fn visit<R>(&self, id: NodeId, stats: &mut SearchStats, f: impl FnOnce(&TreeNode<S>) -> R) -> Result<R> {
        let guard = self.fetch_counted(id, stats)?;
        stats.nodes_visited += 1;
        Ok(f(guard.node()))
    }

    fn locate(&self, id: u64) -> Result<Option<(NodeId, u32)>> {
        self.locator_snapshot(|l| l.get(&id).copied())
    }

    fn edges_of(&self, id: u64, stats: &mut SearchStats) -> Result<Vec<u64>> {
        let Some((leaf, slot)) = self.locate(id)? else {
            return Ok(Vec::new());
        };
        let guard = self.fetch_counted(leaf, stats)?;
        stats.nodes_visited += 1;
        Ok(guard
            .edges()
            .and_then(|e| e.get(slot as usize).cloned())
            .unwrap_or_default())
    }

    fn leaf_parent(&self, leaf: NodeId) -> Result<Option<NodeId>> {
        self.parents_snapshot(|p| p.get(&leaf).copied())
    }

    fn end_level(&self) -> Result<()> {
        if self.cache.lock().bytes_used > self.capacity() {
            self.lru_maintain()?;
        }
        Ok(())
    }
}
