//! C ABI over the synchromat core.
//!
//! Networks, registries and snapshots are opaque handles created from JSON
//! text and released with their `_free` function. Every fallible call returns
//! an [`SmStatus`]; on failure `sm_last_error_message` describes the cause.
//! Strings handed out by the library are released with `sm_string_free`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use synchromat::output::SnapshotRecord;
use synchromat::synchro::{MaterialId, SynchroError};
use synchromat::{ClassId, CompartmentId, CompositionRegistry, Counts, DetectionReport, SynchroSnapshot, TmnNetwork};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    ValidationError = 4,
    UnknownClass = 5,
    UnitNotInNetwork = 6,
    NotFound = 7,
    Panic = 8,
}

/// One `(unit, class, count)` detection triple.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SmDetection {
    pub unit: u32,
    pub class_id: u32,
    pub count: u32,
}

pub struct SmNetwork(TmnNetwork);
pub struct SmRegistry(CompositionRegistry);
pub struct SmSnapshot(SynchroSnapshot);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(status: SmStatus, msg: impl Into<String>) -> SmStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> SmStatus) -> SmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == SmStatus::Ok {
                set_error("");
            }
            status
        }
        Err(_) => fail(SmStatus::Panic, "internal panic"),
    }
}

unsafe fn text<'a>(s: *const c_char) -> Result<&'a str, SmStatus> {
    if s.is_null() {
        return Err(fail(SmStatus::NullArgument, "string argument is null"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(SmStatus::InvalidUtf8, "string argument is not UTF-8"))
}

fn load_error(e: synchromat::Error) -> SmStatus {
    match e {
        synchromat::Error::Json(_) => fail(SmStatus::ParseError, e.to_string()),
        other => fail(SmStatus::ValidationError, other.to_string()),
    }
}

fn give_string(s: String, out: *mut *mut c_char) -> SmStatus {
    match CString::new(s) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            SmStatus::Ok
        }
        Err(_) => fail(SmStatus::InvalidUtf8, "output contains a NUL byte"),
    }
}

/// Last error message on this thread; empty after a successful call. The
/// pointer stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn sm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sm_network_from_json(json: *const c_char, out: *mut *mut SmNetwork) -> SmStatus {
    guard(|| {
        if out.is_null() {
            return fail(SmStatus::NullArgument, "out is null");
        }
        let json = match text(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match TmnNetwork::from_json(json) {
            Ok(net) => {
                *out = Box::into_raw(Box::new(SmNetwork(net)));
                SmStatus::Ok
            }
            Err(e) => load_error(e),
        }
    })
}

/// # Safety
/// `net` must come from `sm_network_from_json` or be null.
#[no_mangle]
pub unsafe extern "C" fn sm_network_free(net: *mut SmNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Writes node, arc and unit counts; any output pointer may be null.
///
/// # Safety
/// `net` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sm_network_dimensions(
    net: *const SmNetwork,
    nodes: *mut usize,
    arcs: *mut usize,
    units: *mut usize,
) -> SmStatus {
    guard(|| {
        let Some(net) = net.as_ref() else {
            return fail(SmStatus::NullArgument, "network is null");
        };
        for (p, v) in [
            (nodes, net.0.node_count()),
            (arcs, net.0.arc_count()),
            (units, net.0.unit_count()),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        SmStatus::Ok
    })
}

/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sm_registry_from_json(json: *const c_char, out: *mut *mut SmRegistry) -> SmStatus {
    guard(|| {
        if out.is_null() {
            return fail(SmStatus::NullArgument, "out is null");
        }
        let json = match text(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match CompositionRegistry::from_json(json) {
            Ok(reg) => {
                *out = Box::into_raw(Box::new(SmRegistry(reg)));
                SmStatus::Ok
            }
            Err(e) => load_error(e),
        }
    })
}

/// # Safety
/// `reg` must come from `sm_registry_from_json` or be null.
#[no_mangle]
pub unsafe extern "C" fn sm_registry_free(reg: *mut SmRegistry) {
    if !reg.is_null() {
        drop(Box::from_raw(reg));
    }
}

/// Hex content hash agents present when connecting.
///
/// # Safety
/// `reg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sm_registry_hash(reg: *const SmRegistry, out: *mut *mut c_char) -> SmStatus {
    guard(|| {
        let Some(reg) = reg.as_ref() else {
            return fail(SmStatus::NullArgument, "registry is null");
        };
        if out.is_null() {
            return fail(SmStatus::NullArgument, "out is null");
        }
        give_string(reg.0.content_hash(), out)
    })
}

/// Computes the snapshot of one epoch. Every unit named in `detections`
/// counts as reporting; a triple with count 0 marks a unit that saw nothing.
/// Repeated `(unit, class)` triples add up.
///
/// # Safety
/// `net` and `reg` must be live handles, `detections` must point to `len`
/// triples (or be null with `len == 0`) and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sm_snapshot_compute(
    net: *const SmNetwork,
    reg: *const SmRegistry,
    epoch: u64,
    detections: *const SmDetection,
    len: usize,
    out: *mut *mut SmSnapshot,
) -> SmStatus {
    guard(|| {
        let (Some(net), Some(reg)) = (net.as_ref(), reg.as_ref()) else {
            return fail(SmStatus::NullArgument, "network or registry is null");
        };
        if out.is_null() || (detections.is_null() && len > 0) {
            return fail(SmStatus::NullArgument, "out or detections is null");
        }
        let triples = if len == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(detections, len)
        };
        let mut per_unit: BTreeMap<CompartmentId, Counts> = BTreeMap::new();
        for d in triples {
            let counts = per_unit.entry(CompartmentId(d.unit)).or_default();
            if d.count > 0 {
                *counts.entry(ClassId(d.class_id)).or_insert(0) += d.count;
            }
        }
        let reports: Vec<DetectionReport> = per_unit
            .into_iter()
            .map(|(k, c)| DetectionReport::new(k, epoch, c))
            .collect();
        match SynchroSnapshot::compute(&net.0, &reg.0, epoch, &reports) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(SmSnapshot(s)));
                SmStatus::Ok
            }
            Err(e @ SynchroError::UnknownClass { .. }) => fail(SmStatus::UnknownClass, e.to_string()),
            Err(e @ SynchroError::UnitNotInNetwork(_)) => fail(SmStatus::UnitNotInNetwork, e.to_string()),
            Err(e) => fail(SmStatus::ValidationError, e.to_string()),
        }
    })
}

/// # Safety
/// `snap` must come from `sm_snapshot_compute` or be null.
#[no_mangle]
pub unsafe extern "C" fn sm_snapshot_free(snap: *mut SmSnapshot) {
    if !snap.is_null() {
        drop(Box::from_raw(snap));
    }
}

unsafe fn read_snapshot(
    snap: *const SmSnapshot,
    out: *mut u64,
    get: impl FnOnce(&SynchroSnapshot) -> Option<u64>,
) -> SmStatus {
    guard(|| {
        let Some(snap) = snap.as_ref() else {
            return fail(SmStatus::NullArgument, "snapshot is null");
        };
        if out.is_null() {
            return fail(SmStatus::NullArgument, "out is null");
        }
        match get(&snap.0) {
            Some(v) => {
                *out = v;
                SmStatus::Ok
            }
            None => fail(SmStatus::NotFound, "no such unit or material"),
        }
    })
}

/// Total detected mass in milligrams.
///
/// # Safety
/// `snap` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sm_snapshot_total_mass(snap: *const SmSnapshot, out: *mut u64) -> SmStatus {
    read_snapshot(snap, out, |s| Some(s.total_mass))
}

/// # Safety
/// `snap` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sm_snapshot_unit_mass(snap: *const SmSnapshot, unit: u32, out: *mut u64) -> SmStatus {
    read_snapshot(snap, out, |s| s.per_unit_mass.get(&CompartmentId(unit)).copied())
}

/// # Safety
/// `snap` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sm_snapshot_material_total(snap: *const SmSnapshot, material: u32, out: *mut u64) -> SmStatus {
    read_snapshot(snap, out, |s| s.total_material.get(&MaterialId(material)).copied())
}

/// # Safety
/// `snap` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sm_snapshot_unit_material(
    snap: *const SmSnapshot,
    unit: u32,
    material: u32,
    out: *mut u64,
) -> SmStatus {
    read_snapshot(snap, out, |s| {
        s.unit_material(CompartmentId(unit), MaterialId(material))
    })
}

/// The snapshot as one JSON record, same shape as a `snapshots.jsonl` line
/// with `ts_ms` set to 0.
///
/// # Safety
/// `snap` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sm_snapshot_to_json(snap: *const SmSnapshot, out: *mut *mut c_char) -> SmStatus {
    guard(|| {
        let Some(snap) = snap.as_ref() else {
            return fail(SmStatus::NullArgument, "snapshot is null");
        };
        if out.is_null() {
            return fail(SmStatus::NullArgument, "out is null");
        }
        give_string(SnapshotRecord::from_snapshot(&snap.0, 0).to_line(), out)
    })
}
