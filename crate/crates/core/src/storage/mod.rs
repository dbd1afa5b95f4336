//! Page file persistence and the disk-resident index.

mod disk;
mod format;

pub use disk::{open_index, DiskIndex, EvictionReport, IoStats, MaintenanceTask, NodeGuard, OpenOptions};
pub use format::{
    check_page_size, deserialize, read_layout, serialize, DirEntry, FileLayout, NodeRecord, DEFAULT_PAGE_SIZE, MAGIC,
    VERSION,
};
