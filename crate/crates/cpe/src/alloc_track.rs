//! Allocator-level memory accounting.
//!
//! Install [`CountingAlloc`] as the `#[global_allocator]` of a binary to get
//! live and peak heap byte counts. Without it, [`peak_source`] falls back to
//! the kernel's resident-set high-water mark.

use std::{
    alloc::{GlobalAlloc, Layout, System},
    sync::atomic::{AtomicBool, AtomicUsize, Ordering},
};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

pub struct CountingAlloc;

fn grow(bytes: usize) {
    let now = CURRENT.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            ACTIVE.store(true, Ordering::Relaxed);
            grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            ACTIVE.store(true, Ordering::Relaxed);
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size >= layout.size() {
                grow(new_size - layout.size());
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

/// Whether a [`CountingAlloc`] is installed and has seen traffic.
pub fn is_active() -> bool {
    ACTIVE.load(Ordering::Relaxed)
}

pub fn current() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

pub fn peak() -> usize {
    PEAK.load(Ordering::Relaxed)
}

/// Restart peak tracking from the live byte count, which is returned.
pub fn reset_peak() -> usize {
    let now = current();
    PEAK.store(now, Ordering::Relaxed);
    now
}

/// `VmHWM` from `/proc/self/status`, in bytes.
pub fn resident_high_water() -> Option<usize> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: usize = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemorySource {
    Allocator,
    ResidentSet,
    Unavailable,
}

impl MemorySource {
    pub fn as_str(self) -> &'static str {
        match self {
            MemorySource::Allocator => "allocator",
            MemorySource::ResidentSet => "rss",
            MemorySource::Unavailable => "none",
        }
    }
}

pub fn peak_source() -> MemorySource {
    if is_active() {
        MemorySource::Allocator
    } else if resident_high_water().is_some() {
        MemorySource::ResidentSet
    } else {
        MemorySource::Unavailable
    }
}

/// Measures peak working memory of a region of code.
pub struct PeakProbe {
    baseline: usize,
    source: MemorySource,
}

impl PeakProbe {
    pub fn start() -> Self {
        let source = peak_source();
        let baseline = match source {
            MemorySource::Allocator => reset_peak(),
            MemorySource::ResidentSet => 0,
            MemorySource::Unavailable => 0,
        };
        PeakProbe { baseline, source }
    }

    /// Bytes above the baseline at the high-water mark. Under the resident-set
    /// fallback this is the process-wide high-water mark.
    pub fn finish(&self) -> (usize, MemorySource) {
        let bytes = match self.source {
            MemorySource::Allocator => peak().saturating_sub(self.baseline),
            MemorySource::ResidentSet => resident_high_water().unwrap_or(0),
            MemorySource::Unavailable => 0,
        };
        (bytes, self.source)
    }
}
